"""Command-line interface: the package's only human-facing surface.

Subcommands cover the full workflow: synthesize data, train, evaluate,
predict single images, run the four-variant ablation, and run the
gradient-check suites. Exit status is 0 on success, 1 for validation or
data problems, and 2 for numerical failures (non-finite loss, failed
gradient checks). All diagnostics go to standard error.

Seed precedence: an explicit --seed flag wins; otherwise the PSEG_SEED
environment variable, when set, overrides the seed from the config file
or the built-in default. No other environment variable is consulted.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as dataio
from . import gradsuite
from .blocks import VARIANTS, PotholeNet
from .config import CliConfig, parse_config
from .errors import ArgumentError, NumericalError, PotsegError
from .metrics import evaluation_report, format_percent
from .training import evaluate, history_csv, run_ablation, train


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage through the package's exit codes."""

    def error(self, message):
        raise ArgumentError(message)


def _env_seed() -> int | None:
    raw = os.environ.get("PSEG_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ArgumentError(f"PSEG_SEED must be an integer, got {raw!r}") from None


def _load_config(path: str | None) -> CliConfig:
    if path is None:
        cfg = parse_config("")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ArgumentError(f"cannot read config file: {e}") from None
        cfg = parse_config(text)
    env = _env_seed()
    if env is not None:
        cfg = CliConfig(cfg.model, replace(cfg.train, seed=env))
    return cfg


def _modality_for(cfg: CliConfig) -> str:
    return "rgb" if cfg.model.in_channels == 3 else "disparity"


def _apply_modality(cfg: CliConfig, modality: str) -> CliConfig:
    in_channels = 3 if modality == "rgb" else 1
    return CliConfig(replace(cfg.model, in_channels=in_channels), cfg.train)


def _write_text(path: str, text: str) -> None:
    out = Path(path)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    seed = args.seed
    if seed is None:
        seed = _env_seed()
    if seed is None:
        seed = 0
    dataio.synth_generate(args.n, args.size, seed, args.out)
    print(f"wrote {args.n} scenes of size {args.size} (seed {seed}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _apply_modality(_load_config(args.config), args.modality)
    if args.variant is not None:
        cfg = CliConfig(cfg.model, replace(cfg.train, variant=args.variant))
    dataset = dataio.load_dataset(args.data, args.modality)
    model = PotholeNet(cfg.model, cfg.train.variant, seed=cfg.train.seed)
    model, history = train(dataset, model, cfg.train)
    steps = cfg.train.epochs * len(dataset)
    dataio.save_checkpoint(model, args.out_ckpt, step=steps,
                           seed=cfg.train.seed, train_cfg=cfg.train)
    history_path = args.history
    if history_path is None:
        history_path = str(Path(args.out_ckpt).with_suffix(".history.csv"))
    _write_text(history_path, history_csv(history))
    last = history[-1]
    print(f"trained {cfg.train.variant} for {cfg.train.epochs} epochs "
          f"({len(dataset)} samples)")
    print(f"final loss {last.loss:.4f}, train mIoU {format_percent(last.miou)}%, "
          f"train mFsc {format_percent(last.mfsc)}%")
    print(f"checkpoint: {args.out_ckpt}")
    print(f"history: {history_path}")
    return 0


def _cmd_eval(args) -> int:
    model = dataio.load_checkpoint(args.ckpt)
    modality = "rgb" if model.cfg.in_channels == 3 else "disparity"
    dataset = dataio.load_dataset(args.data, modality)
    result = evaluate(dataset, model)
    report = evaluation_report(result.confusion,
                               title=f"Evaluation of {Path(args.ckpt).name}")
    if args.report is not None:
        _write_text(args.report, report)
        print(f"report: {args.report}")
    print(f"mIoU {format_percent(result.miou)}%  mFsc {format_percent(result.mfsc)}%  "
          f"({len(dataset)} samples, modality {modality})")
    return 0


def _overlay(image_chw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Tint predicted pothole pixels red at 50% opacity over the input."""
    if image_chw.shape[0] == 1:
        rgb = np.repeat(image_chw, 3, axis=0)
    else:
        rgb = image_chw.copy()
    red = np.zeros_like(rgb)
    red[0] = 1.0
    hit = mask.astype(bool)[None, :, :]
    return np.where(hit, 0.5 * rgb + 0.5 * red, rgb)


def _cmd_predict(args) -> int:
    model = dataio.load_checkpoint(args.ckpt)
    modality = "rgb" if model.cfg.in_channels == 3 else "disparity"
    image, h, w = dataio.load_image(Path(args.image), modality)
    mask = model(image).data.argmax(axis=0)[:h, :w]
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask * 255).astype(np.uint8)).save(out)
    overlay = _overlay(image.data[:, :h, :w], mask)
    overlay_u8 = np.clip(np.rint(overlay * 255.0), 0, 255).astype(np.uint8)
    overlay_path = out.with_name(out.stem + "_overlay.png")
    Image.fromarray(overlay_u8.transpose(1, 2, 0)).save(overlay_path)
    frac = float(mask.mean())
    print(f"mask: {out} ({h}x{w}, {format_percent(frac)}% pothole)")
    print(f"overlay: {overlay_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    modality = _modality_for(cfg)
    dataset = dataio.load_dataset(args.data, modality)
    table, _ = run_ablation(dataset, cfg.model, cfg.train)
    _write_text(args.report, table)
    print(table, end="")
    print(f"report: {args.report}")
    return 0


def _cmd_gradcheck(args) -> int:
    if args.op is not None and args.all:
        raise ArgumentError("pass either --op or --all, not both")
    names = None if (args.all or args.op is None) else [args.op]
    seed = args.seed
    if seed is None:
        seed = _env_seed()
    if seed is None:
        seed = 0
    results = gradsuite.run_suite(names, trials=args.trials, tol=args.tol, seed=seed)
    print(gradsuite.suite_report(results), end="")
    if all(r.passed for r in results):
        return 0
    print("gradient checks failed", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="potseg",
                     description="Road-pothole segmentation workbench.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--size", type=int, required=True,
                   help="square extent, multiple of 8")
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (default 0; PSEG_SEED overrides the default)")
    p.add_argument("--out", required=True, help="output dataset root")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one variant, save checkpoint + history")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--modality", choices=("rgb", "disparity"), default="rgb")
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="overrides the config file's variant")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out-ckpt", required=True, help="checkpoint output path")
    p.add_argument("--history", default=None,
                   help="history CSV path (default: alongside the checkpoint)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--report", default=None, help="Markdown report output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="predict one image; write mask + overlay")
    p.add_argument("--image", required=True, help="input image path")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="mask PNG output path")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ablate", help="train all four variants, emit the table")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--report", required=True, help="Markdown table output path")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="run finite-difference gradient suites")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--op", default=None,
                       help=f"one entry ({', '.join(gradsuite.ENTRIES)})")
    group.add_argument("--all", action="store_true", help="every entry (default)")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None,
                   help="suite seed (default 0; PSEG_SEED overrides the default)")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except PotsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"file error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
