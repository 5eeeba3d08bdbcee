"""Architecture blocks: identities, oracles, shape and error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from potseg import (
    VARIANT_LABELS,
    VARIANTS,
    ArgumentError,
    AsppBlock,
    AttentionMap,
    CamBlock,
    CapacityError,
    Conv2d,
    DilatedBackbone,
    DimensionError,
    MsffmBlock,
    ModelConfig,
    NumericalError,
    PotholeNet,
    ResidualBlock,
    Tensor,
    bilinear_upsample,
    relu,
    sum_all,
)

TINY = ModelConfig(stage_widths=(4, 4, 4, 4, 4), stage_blocks=(1, 1, 1, 1, 1),
                   aspp_width=4, aspp_rates=(2, 3, 5))


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.output_stride == 8
        assert cfg.num_classes == 2
        assert cfg.stage_widths == (16, 32, 64, 64, 64)

    @pytest.mark.parametrize("kw", [
        {"in_channels": 2},
        {"num_classes": 1},
        {"stage_widths": (16, 32, 64)},
        {"stage_blocks": (1, 1, 2, 2)},
        {"stage_widths": (16, 32, 64, 64, 0)},
        {"output_stride": 16},
        {"msffm_compression": 0},
        {"msffm_compression": 128},
        {"cam_reduction": 0},
        {"aspp_rates": ()},
        {"aspp_rates": (0, 12, 18)},
        {"aspp_width": 0},
        {"attention_cap": 0},
    ])
    def test_invalid_fields_rejected(self, kw):
        with pytest.raises(ArgumentError):
            ModelConfig(**kw)

    def test_frozen(self):
        with pytest.raises(Exception):
            ModelConfig().num_classes = 3


class TestLayerNaming:
    def test_dotted_names_deterministic_and_unique(self):
        model = PotholeNet(TINY, "+cam+msffm", seed=0)
        names = [n for n, _ in model.named_parameters()]
        assert names == [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert "backbone.stage1.block1.conv1.weight" in names
        assert "msffm.alpha" in names

    def test_every_parameter_requires_grad(self):
        model = PotholeNet(TINY, "+cam+msffm", seed=0)
        for name, p in model.named_parameters():
            assert p.requires_grad, name
            assert p.grad is not None, name

    def test_zero_grads(self, rng):
        model = PotholeNet(TINY, "baseline", seed=0)
        for _, p in model.named_parameters():
            p.grad[:] = 1.0
        model.zero_grads()
        for name, p in model.named_parameters():
            assert not p.grad.any(), name


class TestResidualBlock:
    def test_fresh_block_equals_relu_of_input(self, rng):
        # The residual branch ends in a zero-initialized conv and the
        # shortcut is the identity here, so a fresh block computes relu(x).
        block = ResidualBlock(rng, 4, 4)
        assert block.shortcut is None
        x = Tensor(rng.standard_normal((4, 6, 6)))
        np.testing.assert_array_equal(block(x).data, np.maximum(x.data, 0.0))

    def test_fresh_block_with_projection_shortcut(self, rng):
        block = ResidualBlock(rng, 4, 8, stride=2)
        x = Tensor(rng.standard_normal((4, 6, 6)))
        got = block(x)
        assert got.shape == (8, 3, 3)
        np.testing.assert_array_equal(got.data, relu(block.shortcut(x)).data)

    def test_stride_and_dilation_shapes(self, rng):
        x = Tensor(rng.standard_normal((4, 12, 12)))
        assert ResidualBlock(rng, 4, 4, stride=2)(x).shape == (4, 6, 6)
        assert ResidualBlock(rng, 4, 4, dilation=2)(x).shape == (4, 12, 12)

    def test_gradients_reach_every_parameter(self, rng):
        block = ResidualBlock(rng, 3, 5, stride=2)
        # Push conv2 off its zero init so its gradient path is exercised.
        block.conv2.weight.data += rng.standard_normal(block.conv2.weight.shape) * 0.1
        x = Tensor(rng.standard_normal((3, 6, 6)), requires_grad=True)
        block.zero_grads()
        sum_all(block(x)).backward()
        for name, p in block.named_parameters():
            assert np.isfinite(p.grad).all(), name
        assert np.abs(block.conv1.weight.grad).max() > 0


class TestDilatedBackbone:
    def test_stage_extents_at_64(self, rng):
        backbone = DilatedBackbone(rng, TINY)
        feats = backbone(Tensor(rng.standard_normal((3, 64, 64))))
        assert [f.shape[1] for f in feats] == [32, 16, 8, 8, 8]
        assert [f.shape[2] for f in feats] == [32, 16, 8, 8, 8]
        assert [f.shape[0] for f in feats] == [4, 4, 4, 4, 4]

    def test_rectangular_input(self, rng):
        backbone = DilatedBackbone(rng, TINY)
        feats = backbone(Tensor(rng.standard_normal((3, 32, 64))))
        assert feats[-1].shape == (4, 4, 8)

    def test_divisibility_enforced(self, rng):
        backbone = DilatedBackbone(rng, TINY)
        with pytest.raises(DimensionError):
            backbone(Tensor(rng.standard_normal((3, 60, 64))))
        with pytest.raises(DimensionError):
            backbone(Tensor(rng.standard_normal((3, 64, 63))))

    def test_dilation_footprint_locality(self, rng):
        # A dilation-4 3x3 conv reads exactly 9 taps spaced 4 apart.
        # Perturbing pixels outside that footprint leaves the output
        # pixel unchanged; perturbing a tap changes it.
        conv = Conv2d(rng, 1, 1, 3, dilation=4, padding=4)
        x = rng.standard_normal((1, 17, 17))
        base = conv(Tensor(x)).data[0, 8, 8]
        taps = {(8 + 4 * dy, 8 + 4 * dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}
        for (py, px) in [(8, 7), (7, 8), (8, 5), (0, 0), (8, 11), (10, 10)]:
            assert (py, px) not in taps
            xp = x.copy()
            xp[0, py, px] += 10.0
            assert conv(Tensor(xp)).data[0, 8, 8] == base
        xp = x.copy()
        xp[0, 8, 12] += 10.0
        assert conv(Tensor(xp)).data[0, 8, 8] != base


class TestCamBlock:
    def test_zeroed_expand_gates_at_half(self, rng):
        # sigmoid(0) = 0.5 exactly, so zeroing the expand conv must scale
        # every channel by exactly 0.5.
        cam = CamBlock(rng, 8, reduction=4)
        cam.expand.weight.data[:] = 0.0
        cam.expand.bias.data[:] = 0.0
        x = Tensor(rng.standard_normal((8, 5, 5)))
        np.testing.assert_array_equal(cam(x).data, 0.5 * x.data)

    def test_matches_oracle(self, rng):
        cam = CamBlock(rng, 4, reduction=2)
        # Init zeroes biases; randomize them so the oracle sees them.
        cam.reduce.bias.data[:] = rng.standard_normal(cam.reduce.bias.shape)
        cam.expand.bias.data[:] = rng.standard_normal(cam.expand.bias.shape)
        x = rng.standard_normal((4, 3, 3))
        want = oracles.cam_oracle(
            x,
            cam.reduce.weight.data, cam.reduce.bias.data,
            cam.expand.weight.data, cam.expand.bias.data,
        )
        np.testing.assert_allclose(cam(Tensor(x)).data, want, rtol=1e-9, atol=1e-9)

    def test_gate_shrinks_magnitudes(self, rng):
        cam = CamBlock(rng, 6, reduction=3)
        x = rng.standard_normal((6, 4, 4)) * 10
        out = cam(Tensor(x)).data
        assert (np.abs(out) <= np.abs(x)).all()
        sign = np.sign(out) * np.sign(x)
        assert (sign[x != 0] >= 0).all()

    @given(exponent=st.integers(min_value=-8, max_value=8))
    @settings(max_examples=17)
    def test_gate_open_interval_across_scales(self, exponent):
        rng = np.random.default_rng(7)
        cam = CamBlock(rng, 4, reduction=2)
        x = rng.standard_normal((4, 3, 3)) * (10.0 ** exponent)
        out = cam(Tensor(x)).data
        nz = x != 0
        ratio = out[nz] / x[nz]
        assert (ratio > 0.0).all() and (ratio < 1.0).all()

    def test_channel_mismatch(self, rng):
        cam = CamBlock(rng, 4, reduction=2)
        with pytest.raises(DimensionError):
            cam(Tensor(rng.standard_normal((5, 3, 3))))

    def test_reduction_validation(self, rng):
        with pytest.raises(ArgumentError):
            CamBlock(rng, 4, reduction=0)
        with pytest.raises(ArgumentError):
            CamBlock(rng, 4, reduction=8)  # squeezes to zero channels


class TestAsppBlock:
    def test_output_shape(self, rng):
        aspp = AsppBlock(rng, 8, 4, (2, 3, 5))
        out = aspp(Tensor(rng.standard_normal((8, 8, 8))))
        assert out.shape == (4, 8, 8)

    def test_rate_count_enforced(self, rng):
        with pytest.raises(ArgumentError):
            AsppBlock(rng, 8, 4, (2, 3))

    def test_pool_branch_matches_oracle(self, rng):
        # The image-pool branch is a 1x1 conv of the per-channel means.
        aspp = AsppBlock(rng, 4, 3, (1, 2, 3))
        aspp.pool_proj.bias.data[:] = rng.standard_normal(3)
        x = rng.standard_normal((4, 6, 6))
        from potseg import global_avg_pool
        got = aspp.pool_proj(global_avg_pool(Tensor(x))).data
        want = oracles._conv1x1_oracle(
            oracles.global_avg_pool_oracle(x),
            aspp.pool_proj.weight.data, aspp.pool_proj.bias.data)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
        assert got.shape == (3, 1, 1)

    def test_interior_shift_covariance(self, rng):
        # Away from the zero-padded borders the conv branches commute with
        # translation, and a circular shift preserves the global mean, so
        # interior outputs just move with the input.
        aspp = AsppBlock(rng, 3, 4, (1, 2, 3))
        x = rng.standard_normal((3, 12, 12))
        out1 = aspp(Tensor(x)).data
        dy, dx = 2, 3
        out2 = aspp(Tensor(np.roll(x, (dy, dx), axis=(1, 2)))).data
        for y in range(3, 7):
            for xx in range(3, 6):
                np.testing.assert_allclose(out2[:, y + dy, xx + dx],
                                           out1[:, y, xx], atol=1e-12)

    def test_dilated_branch_matches_conv_oracle(self, rng):
        # Branches are linear (no activation), so each equals a plain
        # dilated convolution of the input.
        aspp = AsppBlock(rng, 3, 2, (2, 3, 5))
        x = rng.standard_normal((3, 9, 9))
        branch = aspp.dilated[0]  # rate 2, same padding 2
        got = branch(Tensor(x)).data
        want = oracles.conv2d_oracle(x, branch.weight.data, branch.bias.data,
                                     1, 2, 2)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    def test_pool_branch_feeds_gradient(self, rng):
        aspp = AsppBlock(rng, 4, 3, (1, 2, 3))
        x = Tensor(rng.standard_normal((4, 6, 6)), requires_grad=True)
        aspp.zero_grads()
        sum_all(aspp(x)).backward()
        assert np.abs(aspp.pool_proj.weight.grad).max() > 0
        assert np.abs(aspp.point.weight.grad).max() > 0
        assert np.abs(x.grad).max() > 0


class TestAttentionMap:
    def test_validate_accepts_stochastic(self):
        AttentionMap(Tensor(np.full((4, 4), 0.25))).validate()

    def test_validate_rejects_bad_row_sum(self):
        m = np.full((4, 4), 0.25)
        m[2, 0] += 1e-3
        with pytest.raises(NumericalError):
            AttentionMap(Tensor(m)).validate()

    def test_validate_rejects_negative(self):
        m = np.array([[-0.1, 1.1], [0.5, 0.5]])
        with pytest.raises(NumericalError):
            AttentionMap(Tensor(m)).validate()

    def test_validate_rejects_non_square(self):
        with pytest.raises(DimensionError):
            AttentionMap(Tensor(np.full((2, 3), 1.0 / 3))).validate()


class TestMsffmBlock:
    def _block(self, rng, channels=4, compression=2, cap=4096):
        return MsffmBlock(rng, channels, compression=compression,
                          attention_cap=cap)

    def test_alpha_starts_at_exactly_zero(self, rng):
        assert self._block(rng).alpha.data.item() == 0.0

    def test_alpha_zero_returns_high_bit_exact(self, rng):
        block = self._block(rng)
        low = Tensor(rng.standard_normal((4, 5, 5)))
        high = Tensor(rng.standard_normal((4, 5, 5)))
        assert np.array_equal(block(low, high).data, high.data)

    def test_attention_rows_are_stochastic(self, rng):
        block = self._block(rng)
        block(Tensor(rng.standard_normal((4, 5, 5))),
              Tensor(rng.standard_normal((4, 5, 5))))
        att = block.last_attention
        assert att is not None
        matrix = att.s.data
        assert matrix.shape == (25, 25)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-6)
        assert (matrix >= 0).all()

    def test_constant_low_gives_uniform_attention_and_mean_value(self, rng):
        # If the compressed low-level map is constant every attention
        # logit in a row ties, so each row is uniform 1/N and the
        # aggregated value is the spatial mean of the value projection.
        block = self._block(rng)
        block.alpha.data[...] = 1.0
        low = Tensor(np.full((4, 3, 3), 2.0))
        high = Tensor(np.zeros((4, 3, 3)))
        out = block(low, high)
        att = block.last_attention.s.data
        np.testing.assert_allclose(att, 1.0 / 9, atol=1e-12)
        v = block.value_proj(low).data.reshape(4, 9)
        want = np.repeat(v.mean(axis=1, keepdims=True), 9, axis=1).reshape(4, 3, 3)
        np.testing.assert_allclose(out.data, want, rtol=1e-9, atol=1e-9)

    def test_matches_oracle(self, rng):
        block = self._block(rng, channels=2, compression=2)
        block.alpha.data[...] = 0.7
        for conv in (block.compress_low, block.compress_high, block.value_proj):
            conv.bias.data[:] = rng.standard_normal(conv.bias.shape)
        low = rng.standard_normal((2, 2, 2))
        high = rng.standard_normal((2, 2, 2))
        want = oracles.msffm_oracle(
            low, high,
            block.compress_low.weight.data, block.compress_low.bias.data,
            block.compress_high.weight.data, block.compress_high.bias.data,
            block.value_proj.weight.data, block.value_proj.bias.data,
            0.7,
        )
        got = block(Tensor(low), Tensor(high)).data
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    def test_capacity_error(self, rng):
        block = self._block(rng, cap=24)
        low = Tensor(rng.standard_normal((4, 5, 5)))  # 25 positions > 24
        with pytest.raises(CapacityError):
            block(low, low)

    def test_spatial_permutation_equivariance(self, rng):
        # Attention carries no positional encoding: permuting both inputs
        # by the same spatial shuffle permutes the output identically.
        block = self._block(rng)
        block.alpha.data[...] = 0.9
        low = rng.standard_normal((4, 3, 3))
        high = rng.standard_normal((4, 3, 3))
        base = block(Tensor(low), Tensor(high)).data.reshape(4, 9)

        perm = rng.permutation(9)
        low_p = low.reshape(4, 9)[:, perm].reshape(4, 3, 3)
        high_p = high.reshape(4, 9)[:, perm].reshape(4, 3, 3)
        got = block(Tensor(low_p), Tensor(high_p)).data.reshape(4, 9)
        np.testing.assert_allclose(got, base[:, perm], rtol=1e-9, atol=1e-9)

    def test_shape_mismatch(self, rng):
        block = self._block(rng)
        with pytest.raises(DimensionError):
            block(Tensor(rng.standard_normal((4, 3, 3))),
                  Tensor(rng.standard_normal((4, 4, 4))))

    def test_compression_validation(self, rng):
        with pytest.raises(ArgumentError):
            MsffmBlock(rng, 4, compression=8)


class TestPotholeNet:
    def test_variant_registry(self):
        assert VARIANTS == ("baseline", "+cam", "+msffm", "+cam+msffm")
        assert VARIANT_LABELS["baseline"] == "Baseline"
        assert VARIANT_LABELS["+cam"] == "Baseline + CAM"
        assert VARIANT_LABELS["+msffm"] == "Baseline + MSFFM"
        assert VARIANT_LABELS["+cam+msffm"] == "Baseline + CAM + MSFFM (ours)"

    def test_unknown_variant_lists_options(self):
        with pytest.raises(ArgumentError) as e:
            PotholeNet(TINY, "+attention", seed=0)
        for v in VARIANTS:
            assert v in str(e.value)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_logits_full_resolution(self, rng, variant):
        model = PotholeNet(TINY, variant, seed=0)
        logits = model(Tensor(rng.standard_normal((3, 64, 64))))
        assert logits.shape == (2, 64, 64)

    @given(h8=st.integers(min_value=1, max_value=12),
           w8=st.integers(min_value=1, max_value=12))
    @settings(max_examples=10, deadline=None)
    def test_shape_contract_property(self, h8, w8):
        rng = np.random.default_rng(5)
        model = PotholeNet(TINY, "baseline", seed=1)
        x = Tensor(rng.standard_normal((3, 8 * h8, 8 * w8)))
        assert model(x).shape == (2, 8 * h8, 8 * w8)

    def test_param_counts_strictly_increase_with_attachments(self):
        counts = {v: PotholeNet(ModelConfig(), v, seed=0).param_count()
                  for v in VARIANTS}
        assert counts["baseline"] < counts["+cam"] < counts["+cam+msffm"]
        assert counts["baseline"] < counts["+msffm"] < counts["+cam+msffm"]

    def test_seed_determinism(self):
        a = PotholeNet(TINY, "+cam+msffm", seed=42)
        b = PotholeNet(TINY, "+cam+msffm", seed=42)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_degenerate_config_collapses_to_plain_path(self, rng):
        # With the CAM gates forced to exactly 0.5 (zeroed expand convs)
        # and alpha at its zero init, the full model's logits must equal
        # the same pipeline composed by hand from its own sub-blocks, with
        # the fusion module replaced by its identity-on-high behavior.
        model = PotholeNet(TINY, "+cam+msffm", seed=3)
        for cam in (model.cam4, model.cam5):
            cam.expand.weight.data[:] = 0.0
            cam.expand.bias.data[:] = 0.0
        assert model.msffm.alpha.data.item() == 0.0

        x = Tensor(rng.standard_normal((3, 32, 32)))
        got = model(x).data

        _, _, _, f4, f5 = model.backbone(x)
        aligned = model.align(model.aspp(model.cam5(f5)))
        want = bilinear_upsample(model.classifier(aligned), 8).data
        np.testing.assert_array_equal(got, want)

    def test_input_channel_mismatch(self, rng):
        model = PotholeNet(TINY, "baseline", seed=0)
        with pytest.raises(DimensionError):
            model(Tensor(rng.standard_normal((1, 64, 64))))

    def test_disparity_config_takes_single_channel(self, rng):
        cfg = ModelConfig(in_channels=1, stage_widths=(4, 4, 4, 4, 4),
                          stage_blocks=(1, 1, 1, 1, 1), aspp_width=4,
                          aspp_rates=(2, 3, 5))
        model = PotholeNet(cfg, "baseline", seed=0)
        assert model(Tensor(rng.standard_normal((1, 32, 32)))).shape == (2, 32, 32)

    def test_forward_records_attention_on_msffm_variants(self, rng):
        model = PotholeNet(TINY, "+cam+msffm", seed=0)
        assert model.msffm.last_attention is None
        model(Tensor(rng.standard_normal((3, 32, 32))))
        att = model.msffm.last_attention
        assert att is not None and att.s.shape == (16, 16)
        att.validate()
