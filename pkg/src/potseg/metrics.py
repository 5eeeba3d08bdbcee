"""Confusion-matrix accumulation and segmentation quality measures.

Quality is summarized by mean intersection-over-union (mIoU) and mean
F-score (mFsc) over classes. Per class the two are algebraically locked
together, Fsc = 2*IoU/(1+IoU); both are computed independently from the
raw counts and the identity is re-checked on every evaluation as a cheap
tripwire against counting bugs.

Classes absent from both prediction and truth (empty union) are excluded
from the means rather than scored 0 or 1, so trivial background-only
tiles earn nothing. Means are reported both over all present classes and
for the pothole class alone.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, NumericalError, StateError

FSC_IDENTITY_TOL = 1e-12

POTHOLE_CLASS = 1


class ConfusionMatrix:
    """k x k pixel counts; counts[t][p] = pixels of true class t predicted p."""

    def __init__(self, k: int):
        if k < 2:
            raise DataError(f"confusion matrix needs k >= 2 classes, got {k}")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        """Add one prediction/truth mask pair; order of calls is irrelevant."""
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise DataError(
                f"prediction shape {pred.shape} != truth shape {truth.shape}")
        for name, mask in (("prediction", pred), ("truth", truth)):
            if not np.issubdtype(mask.dtype, np.integer):
                raise DataError(f"{name} mask must be integer, got {mask.dtype}")
            bad = (mask < 0) | (mask >= self.k)
            if bad.any():
                where = tuple(int(i) for i in np.argwhere(bad)[0])
                raise DataError(
                    f"{name} mask has class {mask[where]} at pixel {where}, "
                    f"outside [0, {self.k})")
        joint = np.bincount(
            (truth.reshape(-1) * self.k + pred.reshape(-1)).astype(np.int64),
            minlength=self.k * self.k)
        self.counts += joint.reshape(self.k, self.k)
        return self

    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        if other.k != self.k:
            raise DataError(f"cannot merge matrices with k={self.k} and k={other.k}")
        merged = ConfusionMatrix(self.k)
        merged.counts = self.counts + other.counts
        return merged

    def __eq__(self, other) -> bool:
        return (isinstance(other, ConfusionMatrix) and other.k == self.k
                and np.array_equal(other.counts, self.counts))

    def per_class(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-class (IoU, Fsc) arrays; classes with empty union hold NaN."""
        if self.total() == 0:
            raise StateError("no pixels accumulated; metrics undefined")
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        iou = np.full(self.k, np.nan)
        fsc = np.full(self.k, np.nan)
        present = union > 0
        iou[present] = tp[present] / union[present]
        fsc[present] = 2.0 * tp[present] / (2.0 * tp[present] + fp[present] + fn[present])
        # Algebraic cross-check: Fsc = 2*IoU/(1+IoU), exact up to rounding.
        drift = np.abs(fsc[present] - 2.0 * iou[present] / (1.0 + iou[present]))
        if drift.size and drift.max() > FSC_IDENTITY_TOL:
            raise NumericalError(
                f"Fsc/IoU identity violated by {drift.max():.3e} "
                f"(tol {FSC_IDENTITY_TOL:g}); counting bug suspected")
        return iou, fsc

    def miou(self) -> float:
        iou, _ = self.per_class()
        return float(np.nanmean(iou))

    def mfsc(self) -> float:
        _, fsc = self.per_class()
        return float(np.nanmean(fsc))

    def class_iou(self, c: int) -> float:
        iou, _ = self.per_class()
        self._check_class(c)
        return float(iou[c])

    def class_fsc(self, c: int) -> float:
        _, fsc = self.per_class()
        self._check_class(c)
        return float(fsc[c])

    def _check_class(self, c: int) -> None:
        if not 0 <= c < self.k:
            raise DataError(f"class {c} outside [0, {self.k})")

    def __repr__(self) -> str:
        return f"ConfusionMatrix(k={self.k}, total={self.total()})"


def accumulate(cm: ConfusionMatrix, pred: np.ndarray,
               truth: np.ndarray) -> ConfusionMatrix:
    """Functional alias for ConfusionMatrix.accumulate."""
    return cm.accumulate(pred, truth)


def fsc_from_iou(iou: float) -> float:
    """The exact per-class correspondence between the two measures."""
    return 2.0 * iou / (1.0 + iou)


# ---------------------------------------------------------------------------
# report emitters


def format_percent(fraction: float) -> str:
    """Render a fraction in [0,1] as a two-decimal percentage string."""
    return f"{100.0 * fraction:.2f}"


def ablation_table(rows: list[tuple[str, float, float]]) -> str:
    """Markdown table of (method label, miou, mfsc) rows."""
    lines = [
        "| Methods | mIoU (%) | mFsc (%) |",
        "| --- | --- | --- |",
    ]
    for label, miou, mfsc in rows:
        lines.append(f"| {label} | {format_percent(miou)} | {format_percent(mfsc)} |")
    return "\n".join(lines) + "\n"


def evaluation_report(cm: ConfusionMatrix, title: str = "Evaluation") -> str:
    """Markdown report: means over present classes plus the pothole class alone."""
    iou, fsc = cm.per_class()
    lines = [
        f"# {title}",
        "",
        f"Pixels scored: {cm.total()}",
        "",
        "| Methods | mIoU (%) | mFsc (%) |",
        "| --- | --- | --- |",
        f"| Mean over classes | {format_percent(cm.miou())} | {format_percent(cm.mfsc())} |",
    ]
    if POTHOLE_CLASS < cm.k and not np.isnan(iou[POTHOLE_CLASS]):
        lines.append(
            f"| Pothole class only | {format_percent(iou[POTHOLE_CLASS])} "
            f"| {format_percent(fsc[POTHOLE_CLASS])} |")
    lines += [
        "",
        "Per-class breakdown:",
        "",
        "| Class | IoU (%) | Fsc (%) |",
        "| --- | --- | --- |",
    ]
    for c in range(cm.k):
        if np.isnan(iou[c]):
            lines.append(f"| {c} | n/a | n/a |")
        else:
            lines.append(f"| {c} | {format_percent(iou[c])} | {format_percent(fsc[c])} |")
    return "\n".join(lines) + "\n"
