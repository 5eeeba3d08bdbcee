#!/usr/bin/env python3
"""The full workflow in one sitting: synthesize, train, evaluate, predict.

Generates a small synthetic pothole dataset, overfits a narrow model on it
for a minute, round-trips the result through a checkpoint, and writes a
predicted mask next to the dataset. Everything lands in a fresh temporary
directory whose path is printed at the end.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from potseg import (
    ModelConfig,
    PotholeNet,
    TrainConfig,
    evaluate,
    load_dataset,
    train,
)
from potseg.data import load_checkpoint, save_checkpoint, synth_generate
from potseg.metrics import evaluation_report, format_percent
from potseg.training import predict_mask

TINY = ModelConfig(stage_widths=(4, 4, 4, 4, 4), stage_blocks=(1, 1, 1, 1, 1),
                   aspp_width=4, aspp_rates=(2, 3, 5))


def main() -> None:
    work = Path(tempfile.mkdtemp(prefix="potseg_demo_"))

    print("== synthesize ==")
    root = work / "data"
    synth_generate(6, 32, seed=7, out=root)
    dataset = load_dataset(root, "rgb")
    frac = np.mean([s.mask.mean() for s in dataset])
    print(f"{len(dataset)} scenes of 32x32 at {root}")
    print(f"average pothole coverage: {format_percent(float(frac))}%")

    print("\n== train ==")
    cfg = TrainConfig(epochs=150, eval_interval=30, seed=0)
    model = PotholeNet(TINY, cfg.variant, seed=cfg.seed)
    model, history = train(dataset, model, cfg)
    for row in history:
        print(f"epoch {row.epoch:>3}: loss {row.loss:.4f}  "
              f"train mIoU {format_percent(row.miou)}%")

    print("\n== evaluate ==")
    result = evaluate(dataset, model)
    print(evaluation_report(result.confusion, title="Training-set evaluation"))

    print("== checkpoint round trip ==")
    ckpt = work / "model.ckpt"
    save_checkpoint(model, ckpt, step=cfg.epochs * len(dataset),
                    seed=cfg.seed, train_cfg=cfg)
    reloaded = load_checkpoint(ckpt)
    probe = dataset[0].image
    exact = np.array_equal(model(probe).data, reloaded(probe).data)
    print(f"saved {ckpt.stat().st_size} bytes; reloaded logits bit-exact: "
          f"{exact}")

    print("\n== predict ==")
    sample = dataset[0]
    mask = predict_mask(reloaded, sample.image)
    out = work / f"{sample.id}_pred.png"
    Image.fromarray((mask * 255).astype(np.uint8)).save(out)
    agree = float((mask == sample.mask).mean())
    print(f"prediction for {sample.id}: {format_percent(float(mask.mean()))}% "
          f"pothole, {format_percent(agree)}% pixel agreement with truth")
    print(f"\nartifacts kept in {work}")


if __name__ == "__main__":
    main()
