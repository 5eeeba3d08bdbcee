"""Randomized finite-difference gradient suites for ops and blocks.

Each entry knows how to build one random instance of an op or block and
compare its analytic gradient against central differences. Block-level
entries check the input gradient plus one parameter per trial (rotating
through all parameters across trials) to keep the whole suite fast.

The fusion block is checked with its scale set to a random nonzero
value: at the initial value 0 the low-path gradient is identically zero
and the check would be vacuous.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    GradCheckReport,
    Tensor,
    add,
    bilinear_upsample,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    global_avg_pool,
    grad_check,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    sum_all,
    transpose2d,
)
from .blocks import (
    AsppBlock,
    CamBlock,
    ModelConfig,
    MsffmBlock,
    PotholeNet,
    ResidualBlock,
)
from .errors import ArgumentError

TINY_MODEL = ModelConfig(stage_widths=(4, 4, 4, 4, 4), stage_blocks=(1, 1, 1, 1, 1),
                         aspp_width=4, aspp_rates=(2, 3, 5))


def _away_from_zero(rng, shape, margin=0.1):
    # Keep relu-op test inputs off the kink so plain central differences apply.
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


# --- op-level trials --------------------------------------------------------


def _trial_matmul(rng, tol):
    m, k, n = rng.integers(2, 6, 3)
    b = Tensor(rng.standard_normal((k, n)))
    x = Tensor(rng.standard_normal((m, k)))
    first = grad_check(lambda t: matmul(t, b), x, tol=tol, rng=rng, label="matmul lhs")
    if not first.passed:
        return first
    a = Tensor(rng.standard_normal((m, k)))
    y = Tensor(rng.standard_normal((k, n)))
    return grad_check(lambda t: matmul(a, t), y, tol=tol, rng=rng, label="matmul rhs")


def _trial_transpose2d(rng, tol):
    shape = tuple(rng.integers(2, 7, 2))
    return grad_check(transpose2d, Tensor(rng.standard_normal(shape)),
                      tol=tol, rng=rng, label="transpose2d")


def _trial_reshape(rng, tol):
    c, h, w = rng.integers(2, 5, 3)
    return grad_check(lambda t: reshape(t, (int(c), int(h * w))),
                      Tensor(rng.standard_normal((c, h, w))),
                      tol=tol, rng=rng, label="reshape")


def _trial_add(rng, tol):
    c, h, w = (int(v) for v in rng.integers(2, 5, 3))
    x = Tensor(rng.standard_normal((c, h, w)))
    kind = int(rng.integers(0, 3))
    if kind == 0:
        other = Tensor(rng.standard_normal((c, h, w)), requires_grad=True)
    elif kind == 1:
        other = Tensor(rng.standard_normal((c, 1, 1)), requires_grad=True)
    else:
        other = Tensor(rng.standard_normal(()), requires_grad=True)
    first = grad_check(lambda t: add(t, other), x, tol=tol, rng=rng, label="add lhs")
    if not first.passed:
        return first
    return grad_check(lambda t: add(x, t), other, tol=tol, rng=rng,
                      label=f"add rhs kind={kind}")


def _trial_mul(rng, tol):
    c, h, w = (int(v) for v in rng.integers(2, 5, 3))
    x = Tensor(rng.standard_normal((c, h, w)))
    kind = int(rng.integers(0, 3))
    if kind == 0:
        other = Tensor(rng.standard_normal((c, h, w)), requires_grad=True)
    elif kind == 1:
        other = Tensor(rng.standard_normal((c, 1, 1)), requires_grad=True)
    else:
        other = Tensor(rng.standard_normal(()), requires_grad=True)
    first = grad_check(lambda t: mul(t, other), x, tol=tol, rng=rng, label="mul lhs")
    if not first.passed:
        return first
    return grad_check(lambda t: mul(x, t), other, tol=tol, rng=rng,
                      label=f"mul rhs kind={kind}")


def _trial_sum_all(rng, tol):
    shape = tuple(rng.integers(2, 5, int(rng.integers(1, 4))))
    return grad_check(sum_all, Tensor(rng.standard_normal(shape)),
                      tol=tol, rng=rng, label="sum_all")


def _trial_relu(rng, tol):
    c, h, w = rng.integers(2, 5, 3)
    return grad_check(relu, Tensor(_away_from_zero(rng, (c, h, w))),
                      tol=tol, rng=rng, label="relu")


def _trial_sigmoid(rng, tol):
    c, h, w = rng.integers(2, 5, 3)
    return grad_check(sigmoid, Tensor(rng.standard_normal((c, h, w)) * 3.0),
                      tol=tol, rng=rng, label="sigmoid")


def _trial_softmax_rows(rng, tol):
    r, c = rng.integers(2, 7, 2)
    return grad_check(softmax_rows, Tensor(rng.standard_normal((r, c)) * 2.0),
                      tol=tol, rng=rng, label="softmax_rows")


def _trial_conv2d(rng, tol):
    dilation = int(rng.choice([1, 2, 4]))
    stride = int(rng.choice([1, 2]))
    cin, cout = (int(v) for v in rng.integers(1, 4, 2))
    extent = int(rng.integers(2 * dilation + 1, 2 * dilation + 5))
    x = Tensor(rng.standard_normal((cin, extent, extent)))
    w = Tensor(rng.standard_normal((cout, cin, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(cout), requires_grad=True)
    pad = dilation
    first = grad_check(lambda t: conv2d(t, w, b, stride, dilation, pad), x,
                       tol=tol, rng=rng, label=f"conv2d input d={dilation} s={stride}")
    if not first.passed:
        return first
    second = grad_check(lambda t: conv2d(x, t, b, stride, dilation, pad), w,
                        tol=tol, rng=rng, label="conv2d weight")
    if not second.passed:
        return second
    return grad_check(lambda t: conv2d(x, w, t, stride, dilation, pad), b,
                      tol=tol, rng=rng, label="conv2d bias")


def _trial_global_avg_pool(rng, tol):
    c, h, w = rng.integers(2, 6, 3)
    return grad_check(global_avg_pool, Tensor(rng.standard_normal((c, h, w))),
                      tol=tol, rng=rng, label="global_avg_pool")


def _trial_bilinear_upsample(rng, tol):
    factor = int(rng.choice([2, 3, 8]))
    c, h, w = (int(v) for v in rng.integers(1, 5, 3))
    return grad_check(lambda t: bilinear_upsample(t, factor),
                      Tensor(rng.standard_normal((c, h, w))),
                      tol=tol, rng=rng, label=f"bilinear_upsample f={factor}")


def _trial_concat_channels(rng, tol):
    h, w = (int(v) for v in rng.integers(2, 5, 2))
    c1, c2 = (int(v) for v in rng.integers(1, 4, 2))
    other = Tensor(rng.standard_normal((c2, h, w)))
    return grad_check(lambda t: concat_channels([t, other, mul(t, 2.0)]),
                      Tensor(rng.standard_normal((c1, h, w))),
                      tol=tol, rng=rng, label="concat_channels")


def _trial_cross_entropy(rng, tol):
    k = int(rng.integers(2, 5))
    h, w = (int(v) for v in rng.integers(2, 5, 2))
    target = rng.integers(0, k, (h, w))
    weights = rng.uniform(0.2, 2.0, k) if rng.integers(0, 2) else None
    return grad_check(lambda t: cross_entropy_loss(t, target, weights),
                      Tensor(rng.standard_normal((k, h, w))),
                      tol=tol, rng=rng, label="cross_entropy_loss")


# --- block-level trials -----------------------------------------------------


def _check_block(forward: Callable[[], Tensor], x: Tensor, params,
                 trial: int, rng, tol, label: str,
                 max_coords: int) -> GradCheckReport:
    """Check d(out)/d(x), then d(out)/d(one parameter), rotating per trial."""
    report = grad_check(lambda _: forward(), x, tol=tol, rng=rng,
                        label=f"{label} input", max_coords=max_coords)
    if not report.passed:
        return report
    name, p = params[trial % len(params)]
    return grad_check(lambda _: forward(), p, tol=tol, rng=rng,
                      label=f"{label} param {name}", max_coords=max_coords)


def _trial_residual_block(rng, tol, trial=0):
    cin, cout = (int(v) for v in rng.integers(2, 5, 2))
    stride = int(rng.choice([1, 2]))
    block = ResidualBlock(rng, cin, cout, stride=stride, dilation=int(rng.choice([1, 2])))
    x = Tensor(rng.standard_normal((cin, 6, 6)) * 0.7)
    return _check_block(lambda: block(x), x, list(block.named_parameters()),
                        trial, rng, tol, "residual_block", max_coords=12)


def _trial_cam(rng, tol, trial=0):
    channels = int(rng.choice([4, 8]))
    block = CamBlock(rng, channels, reduction=4)
    x = Tensor(rng.standard_normal((channels, 4, 4)))
    return _check_block(lambda: block(x), x, list(block.named_parameters()),
                        trial, rng, tol, "cam", max_coords=12)


def _trial_aspp(rng, tol, trial=0):
    cin = int(rng.integers(2, 5))
    block = AsppBlock(rng, cin, width=4, rates=(1, 2, 3))
    x = Tensor(rng.standard_normal((cin, 6, 6)) * 0.7)
    return _check_block(lambda: block(x), x, list(block.named_parameters()),
                        trial, rng, tol, "aspp", max_coords=10)


def _trial_msffm(rng, tol, trial=0):
    channels = 4
    block = MsffmBlock(rng, channels, compression=4)
    np.copyto(block.alpha.data, rng.uniform(0.3, 1.2))
    low = Tensor(rng.standard_normal((channels, 3, 3)))
    high = Tensor(rng.standard_normal((channels, 3, 3)))
    report = grad_check(lambda _: block(low, high), low, tol=tol, rng=rng,
                        label="msffm low", max_coords=12)
    if not report.passed:
        return report
    report = grad_check(lambda _: block(low, high), high, tol=tol, rng=rng,
                        label="msffm high", max_coords=12)
    if not report.passed:
        return report
    params = list(block.named_parameters())
    name, p = params[trial % len(params)]
    return grad_check(lambda _: block(low, high), p, tol=tol, rng=rng,
                      label=f"msffm param {name}", max_coords=12)


def _trial_model(rng, tol, trial=0):
    model = PotholeNet(TINY_MODEL, "+cam+msffm", seed=int(rng.integers(0, 2 ** 31)))
    np.copyto(model.msffm.alpha.data, rng.uniform(0.3, 1.2))
    x = Tensor(rng.uniform(0.0, 1.0, (3, 8, 8)))
    return _check_block(lambda: model(x), x, list(model.named_parameters()),
                        trial, rng, tol, "model", max_coords=6)


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    kind: str  # "op" or "block"
    trial: Callable


ENTRIES: dict[str, SuiteEntry] = {
    e.name: e for e in [
        SuiteEntry("matmul", "op", _trial_matmul),
        SuiteEntry("transpose2d", "op", _trial_transpose2d),
        SuiteEntry("reshape", "op", _trial_reshape),
        SuiteEntry("add", "op", _trial_add),
        SuiteEntry("mul", "op", _trial_mul),
        SuiteEntry("sum_all", "op", _trial_sum_all),
        SuiteEntry("relu", "op", _trial_relu),
        SuiteEntry("sigmoid", "op", _trial_sigmoid),
        SuiteEntry("softmax_rows", "op", _trial_softmax_rows),
        SuiteEntry("conv2d", "op", _trial_conv2d),
        SuiteEntry("global_avg_pool", "op", _trial_global_avg_pool),
        SuiteEntry("bilinear_upsample", "op", _trial_bilinear_upsample),
        SuiteEntry("concat_channels", "op", _trial_concat_channels),
        SuiteEntry("cross_entropy_loss", "op", _trial_cross_entropy),
        SuiteEntry("residual_block", "block", _trial_residual_block),
        SuiteEntry("cam", "block", _trial_cam),
        SuiteEntry("aspp", "block", _trial_aspp),
        SuiteEntry("msffm", "block", _trial_msffm),
        SuiteEntry("model", "block", _trial_model),
    ]
}


@dataclass
class EntryResult:
    name: str
    kind: str
    trials: int
    max_rel_error: float
    passed: bool
    first_failure: GradCheckReport | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = (f"{status}  {self.name:<20} {self.trials} trials  "
                f"max rel error {self.max_rel_error:.3e}")
        if self.first_failure is not None:
            text += f"  [{self.first_failure}]"
        return text


def run_entry(name: str, trials: int = 50, tol: float = 1e-4,
              seed: int = 0) -> EntryResult:
    entry = ENTRIES.get(name)
    if entry is None:
        raise ArgumentError(
            f"unknown gradient-suite entry {name!r} (valid: {', '.join(ENTRIES)})")
    max_err = 0.0
    failure = None
    for trial in range(trials):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode()), trial])
        if entry.kind == "block":
            report = entry.trial(rng, tol, trial)
        else:
            report = entry.trial(rng, tol)
        max_err = max(max_err, report.max_rel_error)
        if not report.passed and failure is None:
            failure = report
    return EntryResult(name, entry.kind, trials, max_err, failure is None, failure)


def run_suite(names=None, trials: int = 50, tol: float = 1e-4,
              seed: int = 0) -> list[EntryResult]:
    if names is None:
        names = list(ENTRIES)
    return [run_entry(n, trials, tol, seed) for n in names]


def suite_report(results: list[EntryResult]) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} entries passed")
    return "\n".join(lines) + "\n"
