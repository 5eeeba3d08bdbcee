"""Flat key=value configuration files and their lossless round trip.

One flat namespace covers both the model hyperparameters and the
training hyperparameters, so a single --config file drives any
subcommand. Lines are `key = value`; `#` starts a comment; unknown keys
are rejected. parse(render(cfg)) == cfg holds exactly: floats are
rendered with repr, so every bit survives the trip.

The same text format is embedded into checkpoints as the config echo,
which is how a checkpoint knows the architecture and variant to rebuild.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

from .blocks import ModelConfig
from .errors import ArgumentError
from .training import TrainConfig


@dataclass(frozen=True)
class CliConfig:
    """Parsed configuration: model plus training sections."""

    model: ModelConfig
    train: TrainConfig


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ArgumentError(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ArgumentError(f"expected a number, got {text!r}") from None


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(_parse_int(part.strip()) for part in text.split(","))


def _parse_weights(text: str):
    if text in ("auto", "none"):
        return text
    return tuple(_parse_float(part.strip()) for part in text.split(","))


def _render_list(value) -> str:
    return ",".join(str(v) for v in value)


def _render_weights(value) -> str:
    if isinstance(value, str):
        return value
    return ",".join(repr(float(w)) for w in value)


@dataclass(frozen=True)
class _Key:
    section: str  # "model" or "train"
    field: str
    parse: Callable[[str], object]
    render: Callable[[object], str]


KEYS: dict[str, _Key] = {
    # model section
    "in_channels": _Key("model", "in_channels", _parse_int, str),
    "num_classes": _Key("model", "num_classes", _parse_int, str),
    "stage_widths": _Key("model", "stage_widths", _parse_int_list, _render_list),
    "stage_blocks": _Key("model", "stage_blocks", _parse_int_list, _render_list),
    "output_stride": _Key("model", "output_stride", _parse_int, str),
    "msffm_compression": _Key("model", "msffm_compression", _parse_int, str),
    "cam_reduction": _Key("model", "cam_reduction", _parse_int, str),
    "aspp_rates": _Key("model", "aspp_rates", _parse_int_list, _render_list),
    "aspp_width": _Key("model", "aspp_width", _parse_int, str),
    "attention_cap": _Key("model", "attention_cap", _parse_int, str),
    # train section
    "epochs": _Key("train", "epochs", _parse_int, str),
    "lr": _Key("train", "lr", _parse_float, repr),
    "momentum": _Key("train", "momentum", _parse_float, repr),
    "weight_decay": _Key("train", "weight_decay", _parse_float, repr),
    "schedule": _Key("train", "schedule", str, str),
    "poly_power": _Key("train", "poly_power", _parse_float, repr),
    "class_weights": _Key("train", "class_weights", _parse_weights, _render_weights),
    "seed": _Key("train", "seed", _parse_int, str),
    "eval_interval": _Key("train", "eval_interval", _parse_int, str),
    "variant": _Key("train", "variant", str, str),
}

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
assert {k.field for k in KEYS.values() if k.section == "model"} == _MODEL_FIELDS
assert {k.field for k in KEYS.values() if k.section == "train"} == _TRAIN_FIELDS


def parse_config(text: str, base: CliConfig | None = None) -> CliConfig:
    """Parse `key = value` lines over defaults (or over `base` when given)."""
    if base is None:
        base = CliConfig(ModelConfig(), TrainConfig())
    model_kwargs: dict[str, object] = {}
    train_kwargs: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        name, _, value = line.partition("=")
        name = name.strip()
        value = value.strip()
        key = KEYS.get(name)
        if key is None:
            raise ArgumentError(
                f"config line {lineno}: unknown key {name!r} "
                f"(valid: {', '.join(sorted(KEYS))})")
        try:
            parsed = key.parse(value)
        except ArgumentError as e:
            raise ArgumentError(f"config line {lineno}, key {name!r}: {e}") from None
        (model_kwargs if key.section == "model" else train_kwargs)[key.field] = parsed
    model = _rebuild(ModelConfig, base.model, model_kwargs)
    train = _rebuild(TrainConfig, base.train, train_kwargs)
    return CliConfig(model, train)


def _rebuild(cls, base, overrides: dict):
    kwargs = {f.name: getattr(base, f.name) for f in fields(cls)}
    kwargs.update(overrides)
    return cls(**kwargs)


def render_config(cfg: CliConfig) -> str:
    """Render every key in registry order; parse(render(cfg)) == cfg."""
    lines = []
    for name, key in KEYS.items():
        source = cfg.model if key.section == "model" else cfg.train
        lines.append(f"{name} = {key.render(getattr(source, key.field))}")
    return "\n".join(lines) + "\n"
