#!/usr/bin/env python3
"""A tour of the model zoo: backbone, ASPP, channel gate, attention fusion.

Uses a deliberately narrow configuration so every forward pass is instant,
and pokes at the properties each block is built around: the backbone's
1/8-scale feature pyramid, the channel gate's bounded rescaling, the fusion
block's start-as-identity behaviour, and its row-normalized attention.
"""

from __future__ import annotations

import numpy as np

from potseg import ModelConfig, PotholeNet, Tensor
from potseg.blocks import VARIANTS, CamBlock, MsffmBlock

TINY = ModelConfig(stage_widths=(4, 4, 4, 4, 4), stage_blocks=(1, 1, 1, 1, 1),
                   aspp_width=4, aspp_rates=(2, 3, 5))


def variant_lineup() -> None:
    print("== the four variants ==")
    for variant in VARIANTS:
        model = PotholeNet(TINY, variant, seed=0)
        print(f"{variant:<12} {model.param_count():>6} parameters")


def feature_pyramid() -> None:
    print("\n== backbone pyramid for a 64x64 input ==")
    model = PotholeNet(TINY, "+cam+msffm", seed=0)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 64, 64)))
    for i, feat in enumerate(model.backbone(x), start=1):
        c, h, w = feat.data.shape
        print(f"stage {i}: {c} x {h} x {w}")
    logits = model(x)
    print(f"logits : {' x '.join(map(str, logits.data.shape))} "
          "(full resolution)")


def channel_gate() -> None:
    print("\n== channel gate: a bounded, sign-preserving rescale ==")
    rng = np.random.default_rng(2)
    cam = CamBlock(rng, channels=8, reduction=4)
    x = Tensor(rng.normal(size=(8, 6, 6)) * 10)
    y = cam(x)
    ratio = np.abs(y.data) / np.abs(x.data)
    print(f"|out|/|in| ranges over [{ratio.min():.3f}, {ratio.max():.3f}] "
          "- always inside (0, 1)")
    print(f"signs preserved: {bool(np.all(np.sign(y.data) == np.sign(x.data)))}")


def fusion_block() -> None:
    print("\n== attention fusion starts as the identity ==")
    rng = np.random.default_rng(3)
    msffm = MsffmBlock(rng, channels=4)
    low = Tensor(rng.normal(size=(4, 5, 5)))
    high = Tensor(rng.normal(size=(4, 5, 5)))
    out = msffm(low, high)
    print(f"alpha = {msffm.alpha.data.item():.1f}  ->  output == high input: "
          f"{bool(np.array_equal(out.data, high.data))}")

    msffm.alpha.data[...] = 0.8
    moved = msffm(low, high)
    delta = np.abs(moved.data - high.data).max()
    print(f"alpha = 0.8  ->  output moves away from high input "
          f"(max |delta| = {delta:.3f})")

    s = msffm.last_attention.s.data
    print(f"attention matrix: {s.shape[0]} rows, each summing to 1 "
          f"(max drift {np.abs(s.sum(axis=1) - 1).max():.2e}), "
          f"min entry {s.min():.2e} (never negative)")


def main() -> None:
    variant_lineup()
    feature_pyramid()
    channel_gate()
    fusion_block()


if __name__ == "__main__":
    main()
