"""Optimization loop, evaluation loop, and the ablation experiment runner.

Training is plain SGD with momentum at batch size 1, optionally under a
polynomial learning-rate decay, with inverse-frequency class weighting by
default (potholes are rare). Everything is deterministic for a fixed
seed: sample order, parameter updates, and the emitted history rows.

Evaluation is pure (no parameter is touched) and scores only the
unpadded region of each sample, so loader padding never leaks into the
metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Tensor, backward, cross_entropy_loss
from .blocks import VARIANT_LABELS, VARIANTS, ModelConfig, PotholeNet
from .errors import ArgumentError, DimensionError, NumericalError
from .metrics import ConfusionMatrix, ablation_table

SCHEDULES = ("constant", "poly")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "poly"
    poly_power: float = 0.9
    class_weights: "str | tuple[float, ...]" = "auto"
    seed: int = 0
    eval_interval: int = 10
    variant: str = "+cam+msffm"

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ArgumentError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise ArgumentError(
                f"schedule must be one of {', '.join(SCHEDULES)}, got {self.schedule!r}")
        if not self.poly_power > 0:
            raise ArgumentError(f"poly_power must be > 0, got {self.poly_power}")
        if self.eval_interval < 1:
            raise ArgumentError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.variant not in VARIANTS:
            raise ArgumentError(
                f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if isinstance(self.class_weights, str):
            if self.class_weights not in ("auto", "none"):
                raise ArgumentError(
                    f"class_weights must be 'auto', 'none', or explicit floats, "
                    f"got {self.class_weights!r}")
        else:
            object.__setattr__(self, "class_weights",
                               tuple(float(w) for w in self.class_weights))
            if any(w < 0 for w in self.class_weights):
                raise ArgumentError("class weights must be non-negative")


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    miou: float
    mfsc: float


def history_csv(rows: Sequence[HistoryRow]) -> str:
    """Render history rows as CSV; repr keeps floats byte-stable."""
    lines = ["epoch,loss,miou,mfsc"]
    for r in rows:
        lines.append(f"{r.epoch},{r.loss!r},{r.miou!r},{r.mfsc!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer


class SgdState:
    """Per-parameter velocity buffers, keyed by parameter name."""

    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}


def sgd_step(named_params, state: SgdState, lr: float, momentum: float,
             weight_decay: float, step_index: int = 0) -> None:
    """One momentum-SGD update: v <- m*v + g + wd*w; w <- w - lr*v.

    Gradients are zeroed after the update. A non-finite gradient aborts
    before any parameter is touched.
    """
    pairs = list(named_params)
    for name, p in pairs:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NumericalError(
                f"non-finite gradient in parameter {name!r} at step {step_index}")
    for name, p in pairs:
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad + weight_decay * p.data
        state.velocity[name] = v
        p.data -= lr * v
        p.zero_grad()


def schedule_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for global step `step` of `total_steps`."""
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * (1.0 - step / total_steps) ** cfg.poly_power


# ---------------------------------------------------------------------------
# class weighting


def inverse_frequency_weights(dataset, num_classes: int) -> np.ndarray:
    """w_c = total/(k * count_c) over unpadded pixels; absent classes get 0."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in dataset:
        region = s.mask[:s.orig_h, :s.orig_w]
        counts += np.bincount(region.reshape(-1), minlength=num_classes)
    total = counts.sum()
    weights = np.zeros(num_classes)
    present = counts > 0
    weights[present] = total / (num_classes * counts[present])
    return weights


def resolve_class_weights(cfg: TrainConfig, dataset,
                          num_classes: int) -> np.ndarray | None:
    if cfg.class_weights == "none":
        return None
    if cfg.class_weights == "auto":
        return inverse_frequency_weights(dataset, num_classes)
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    if weights.shape != (num_classes,):
        raise ArgumentError(
            f"expected {num_classes} class weights, got {len(weights)}")
    return weights


# ---------------------------------------------------------------------------
# loops


def train(dataset, model: PotholeNet,
          cfg: TrainConfig) -> tuple[PotholeNet, list[HistoryRow]]:
    """Train in place; returns the model and its loss/metric history.

    Per epoch: seeded shuffle, then per sample forward, weighted
    cross-entropy, backward, SGD step. History rows (mean epoch loss plus
    training-set mIoU/mFsc) are appended every `eval_interval` epochs and
    at the last epoch.
    """
    if not dataset:
        raise ArgumentError("training dataset is empty")
    k = model.cfg.num_classes
    weights = resolve_class_weights(cfg, dataset, k)
    rng = np.random.default_rng(cfg.seed)
    state = SgdState()
    total_steps = cfg.epochs * len(dataset)
    history: list[HistoryRow] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for i in order:
            sample = dataset[i]
            try:
                loss = cross_entropy_loss(model(sample.image), sample.mask, weights)
                model.zero_grads()
                backward(loss)
            except NumericalError as e:
                raise NumericalError(
                    f"epoch {epoch}, step {step}, sample {sample.id!r}: {e}") from e
            sgd_step(model.named_parameters(), state,
                     schedule_lr(cfg, step, total_steps),
                     cfg.momentum, cfg.weight_decay, step)
            losses.append(loss.item())
            step += 1
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            result = evaluate(dataset, model)
            history.append(HistoryRow(epoch, float(np.mean(losses)),
                                      result.miou, result.mfsc))
    return model, history


@dataclass
class EvalResult:
    miou: float
    mfsc: float
    confusion: ConfusionMatrix

    @property
    def per_class(self) -> tuple[np.ndarray, np.ndarray]:
        return self.confusion.per_class()


def predict_mask(model: PotholeNet, image: Tensor) -> np.ndarray:
    """Argmax class mask for one padded input image."""
    return model(image).data.argmax(axis=0)


def evaluate(dataset, model: PotholeNet) -> EvalResult:
    """Score the model over a dataset; parameters are never touched.

    Only each sample's unpadded region enters the confusion matrix.
    """
    if not dataset:
        raise ArgumentError("evaluation dataset is empty")
    k = model.cfg.num_classes
    cm = ConfusionMatrix(k)
    for s in dataset:
        if s.image.shape[0] != model.cfg.in_channels:
            raise DimensionError(
                f"sample {s.id!r} has {s.image.shape[0]} channels, model expects "
                f"{model.cfg.in_channels} (modality mismatch)")
        pred = predict_mask(model, s.image)
        cm.accumulate(pred[:s.orig_h, :s.orig_w], s.mask[:s.orig_h, :s.orig_w])
    return EvalResult(cm.miou(), cm.mfsc(), cm)


def run_ablation(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 eval_dataset=None) -> tuple[str, dict]:
    """Train all four variants under identical settings; emit the table.

    Returns the Markdown table plus a per-variant record of the trained
    model, its history, and its evaluation (on `eval_dataset` when given,
    else on the training set).
    """
    rows = []
    records: dict[str, dict] = {}
    for variant in VARIANTS:
        model = PotholeNet(model_cfg, variant, seed=train_cfg.seed)
        model, history = train(dataset, model, replace(train_cfg, variant=variant))
        result = evaluate(eval_dataset if eval_dataset is not None else dataset, model)
        rows.append((VARIANT_LABELS[variant], result.miou, result.mfsc))
        records[variant] = {"model": model, "history": history, "eval": result}
    return ablation_table(rows), records
