#!/usr/bin/env python3
"""Train all four variants on one dataset and print the comparison table.

The ablation harness trains baseline, +cam, +msffm, and +cam+msffm from the
same seed on the same data, evaluates each, and formats one Markdown table.
This demo runs it at toy scale, so treat the numbers as plumbing proof, not
as a ranking: a few dozen epochs on a handful of 32x32 scenes cannot
separate the variants meaningfully.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path

from potseg import ModelConfig, TrainConfig, load_dataset, run_ablation
from potseg.data import synth_generate

TINY = ModelConfig(stage_widths=(4, 4, 4, 4, 4), stage_blocks=(1, 1, 1, 1, 1),
                   aspp_width=4, aspp_rates=(2, 3, 5))


def main() -> None:
    work = Path(tempfile.mkdtemp(prefix="potseg_demo_"))
    train_root = work / "train"
    heldout_root = work / "heldout"
    synth_generate(4, 32, seed=21, out=train_root)
    synth_generate(4, 32, seed=22, out=heldout_root)
    train_ds = load_dataset(train_root, "rgb")
    heldout_ds = load_dataset(heldout_root, "rgb")

    cfg = TrainConfig(epochs=60, eval_interval=60, seed=0)
    print(f"training {4} variants x {cfg.epochs} epochs "
          f"on {len(train_ds)} scenes...")
    t0 = time.perf_counter()
    table, records = run_ablation(train_ds, TINY, cfg,
                                  eval_dataset=heldout_ds)
    print(f"done in {time.perf_counter() - t0:.1f}s\n")
    print("held-out comparison (toy scale - plumbing, not a ranking):\n")
    print(table)
    print("final training loss per variant:")
    for variant, rec in records.items():
        print(f"  {variant:<12} {rec['history'][-1].loss:.4f}")
    print(
        "\nA loss near 0.693 (= ln 2) means a variant is still at the\n"
        "uniform-prediction plateau: at this toy scale the plain baseline\n"
        "can take hundreds of epochs to escape it, while the gated variants\n"
        "break the symmetry early. With more data, larger scenes, and the\n"
        "full epoch budget (see the acceptance tests) all four variants\n"
        "train to a loss below 0.05."
    )


if __name__ == "__main__":
    main()
