"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its inputs and a backward closure on the output
tensor; `backward` replays the graph in reverse topological order and
accumulates gradients additively (callers zero grads between steps).

Conventions fixed here so the rest of the package is unambiguous:

* activations are laid out channels x height x width, row-major;
* relu's subgradient at 0 is 0;
* softmax subtracts the row maximum before exponentiating;
* bilinear upsampling uses half-pixel centers;
* any forward op that produces a NaN/Inf raises NumericalError instead
  of propagating the value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, LabelError, NumericalError

Array = np.ndarray

# Smallest representable values keeping sigmoid output inside the open
# interval (0, 1) even where exp() under/overflows in float64.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class Tensor:
    """A float64 array paired with an optional gradient and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable tensor; its grad buffer exists from construction."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        if not name:
            raise ArgumentError("parameter name must be non-empty")
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _quiet() -> np.errstate:
    # Overflow in a forward computation is reported once, as NumericalError,
    # by the finiteness check in _node; numpy's warnings would be redundant.
    return np.errstate(over="ignore", invalid="ignore", divide="ignore",
                       under="ignore")


def _node(data: Array, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap an op result, checking finiteness and recording the graph edge."""
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: non-finite values in output (overflow is an error)")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into every reachable tensor's grad.

    The graph is traversed once in reverse topological order, so a value
    consumed on several paths receives the sum of all path contributions.
    """
    if loss.size != 1:
        raise ArgumentError(f"backward requires a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    with _quiet():
        out_data = a.data @ b.data

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _node(out_data, (a, b), backward_fn, "matmul")


def transpose2d(x: Tensor) -> Tensor:
    """Swap the two axes of a rank-2 tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d needs a rank-2 tensor, got shape {x.shape}")
    out_data = x.data.T

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.T)

    return _node(out_data, (x,), backward_fn, "transpose2d")


def reshape(x: Tensor, new_shape: Sequence[int]) -> Tensor:
    """Reinterpret the flat row-major data under a new shape."""
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != x.size:
        raise DimensionError(
            f"reshape: element count mismatch, {x.shape} -> {new_shape}")
    out_data = x.data.reshape(new_shape)

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _node(out_data, (x,), backward_fn, "reshape")


# ---------------------------------------------------------------------------
# pointwise ops with restricted broadcasting


def _broadcast_kind(a_shape: tuple, b_shape: tuple) -> str:
    if a_shape == b_shape:
        return "equal"
    if math.prod(b_shape) == 1:
        return "scalar"
    if (len(a_shape) == 3 and len(b_shape) == 3
            and b_shape == (a_shape[0], 1, 1)):
        return "channel"
    raise DimensionError(
        f"incompatible shapes for elementwise op: {a_shape} vs {b_shape} "
        "(allowed: equal shapes, per-channel Cx1x1, or scalar)")


def _reduce_to(g: Array, kind: str, shape: tuple) -> Array:
    if kind == "equal":
        return g
    if kind == "scalar":
        return np.full(shape, g.sum())
    return g.sum(axis=(1, 2), keepdims=True)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; b may equal a's shape, be Cx1x1, or be a scalar."""
    b = _as_tensor(b)
    kind = _broadcast_kind(a.shape, b.shape)
    with _quiet():
        out_data = a.data + b.data

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, kind, b.shape))

    return _node(out_data, (a, b), backward_fn, "add")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may equal a's shape, be Cx1x1, or be a scalar."""
    b = _as_tensor(b)
    kind = _broadcast_kind(a.shape, b.shape)
    with _quiet():
        out_data = a.data * b.data

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, kind, b.shape))

    return _node(out_data, (a, b), backward_fn, "mul")


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out_data = np.asarray(x.data.sum())

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.shape))

    return _node(out_data, (x,), backward_fn, "sum_all")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    out_data = np.maximum(x.data, 0.0)

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    return _node(out_data, (x,), backward_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, computed stably; output stays strictly in (0, 1)."""
    out_data = np.empty_like(x.data)
    with _quiet():
        pos = x.data >= 0.0
        out_data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
        ex = np.exp(x.data[~pos])
        out_data[~pos] = ex / (1.0 + ex)
    np.clip(out_data, _SIG_LO, _SIG_HI, out=out_data)

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _node(out_data, (x,), backward_fn, "sigmoid")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor, with max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a rank-2 tensor, got shape {x.shape}")
    with _quiet():
        shifted = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            inner = (g * out_data).sum(axis=1, keepdims=True)
            x.accumulate_grad(out_data * (g - inner))

    return _node(out_data, (x,), backward_fn, "softmax_rows")


# ---------------------------------------------------------------------------
# spatial ops


def same_padding(kernel_size: int, dilation: int = 1) -> int:
    """Padding that keeps spatial extent under stride 1 (odd kernels only)."""
    if kernel_size % 2 != 1:
        raise ArgumentError(f"kernel size must be odd, got {kernel_size}")
    return dilation * (kernel_size - 1) // 2


def conv2d(x: Tensor, w: Tensor, bias: Tensor,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a CxHxW input with a Cout x Cin x k x k kernel.

    Zero padding outside bounds. Forward is an im2col matrix product; the
    test suite holds an independent nested-loop oracle for it.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d input must be CxHxW, got shape {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d kernel must be Cout x Cin x k x k, got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k % 2 != 1:
        raise ArgumentError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ArgumentError(
            f"conv2d: stride={stride}, dilation={dilation}, padding={padding} invalid")
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    h, wth = x.shape[1], x.shape[2]
    eff = dilation * (k - 1) + 1
    if eff > h + 2 * padding or eff > wth + 2 * padding:
        raise DimensionError(
            f"conv2d: receptive field {eff} exceeds padded extent "
            f"{h + 2 * padding}x{wth + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - eff) // stride + 1
    w_out = (wth + 2 * padding - eff) // stride + 1

    cols = np.empty((c_in, k, k, h_out, w_out))
    for i in range(k):
        for j in range(k):
            ys, xs = i * dilation, j * dilation
            cols[:, i, j] = xp[:, ys:ys + (h_out - 1) * stride + 1:stride,
                               xs:xs + (w_out - 1) * stride + 1:stride]
    cols2 = cols.reshape(c_in * k * k, h_out * w_out)
    wmat = w.data.reshape(c_out, c_in * k * k)
    with _quiet():
        out_data = (wmat @ cols2 + bias.data[:, None]).reshape(c_out, h_out, w_out)

    def backward_fn(g: Array) -> None:
        gm = g.reshape(c_out, h_out * w_out)
        if bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=1))
        if w.requires_grad:
            w.accumulate_grad((gm @ cols2.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c_in, k, k, h_out, w_out)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    ys, xs = i * dilation, j * dilation
                    dxp[:, ys:ys + (h_out - 1) * stride + 1:stride,
                        xs:xs + (w_out - 1) * stride + 1:stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + wth]
            x.accumulate_grad(dxp)

    return _node(out_data, (x, w, bias), backward_fn, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent of each channel, kept as Cx1x1."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool input must be CxHxW, got {x.shape}")
    c, h, w = x.shape
    out_data = x.data.mean(axis=(1, 2)).reshape(c, 1, 1)

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / (h * w), x.shape))

    return _node(out_data, (x,), backward_fn, "global_avg_pool")


def _interp_axis(n_in: int, factor: int) -> tuple[Array, Array, Array]:
    # Half-pixel centers: output pixel centers mapped back into the input grid.
    coords = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    coords = np.clip(coords, 0.0, n_in - 1.0)
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, frac


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample CxHxW by an integer factor with bilinear interpolation."""
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_upsample input must be CxHxW, got {x.shape}")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ArgumentError(f"upsample factor must be an integer >= 1, got {factor!r}")
    c, h, w = x.shape
    y0, y1, ty = _interp_axis(h, factor)
    x0, x1, tx = _interp_axis(w, factor)
    wy0, wy1 = (1.0 - ty)[:, None], ty[:, None]
    wx0, wx1 = (1.0 - tx)[None, :], tx[None, :]
    d = x.data
    out_data = (d[:, y0[:, None], x0[None, :]] * (wy0 * wx0)
                + d[:, y0[:, None], x1[None, :]] * (wy0 * wx1)
                + d[:, y1[:, None], x0[None, :]] * (wy1 * wx0)
                + d[:, y1[:, None], x1[None, :]] * (wy1 * wx1))

    def backward_fn(g: Array) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        ch = np.arange(c)[:, None, None]
        for yi, wy in ((y0, wy0), (y1, wy1)):
            for xi, wx in ((x0, wx0), (x1, wx1)):
                np.add.at(dx, (ch, yi[None, :, None], xi[None, None, :]), g * (wy * wx))
        x.accumulate_grad(dx)

    return _node(out_data, (x,), backward_fn, "bilinear_upsample")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate CxHxW tensors along the channel axis."""
    if not parts:
        raise ArgumentError("concat_channels needs at least one tensor")
    spatial = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim != 3 or p.shape[1:] != spatial:
            raise DimensionError(
                f"concat_channels: spatial extents differ, {p.shape} vs (C,)+{spatial}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward_fn(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi])

    return _node(out_data, tuple(parts), backward_fn, "concat_channels")


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits: Tensor, target: Array,
                       class_weights: Array | None = None) -> Tensor:
    """Mean per-pixel cross-entropy of KxHxW logits against an HxW label mask.

    With class weights, each pixel's term is scaled by the weight of its
    true class; the sum is still normalized by the pixel count.
    """
    if logits.data.ndim != 3:
        raise DimensionError(f"cross_entropy: logits must be KxHxW, got {logits.shape}")
    k, h, w = logits.shape
    if k < 2:
        raise ArgumentError(f"cross_entropy needs at least 2 classes, got {k}")
    target = np.asarray(target)
    if target.shape != (h, w):
        raise DimensionError(
            f"cross_entropy: target shape {target.shape} != spatial extent {(h, w)}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ArgumentError(f"cross_entropy: target must be integer, got {target.dtype}")
    bad = (target < 0) | (target >= k)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise LabelError(
            f"cross_entropy: class {target[y, x]} at pixel ({y}, {x}) "
            f"outside [0, {k})")
    if class_weights is not None:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (k,):
            raise DimensionError(
                f"cross_entropy: class_weights shape {class_weights.shape} != ({k},)")
        pixel_w = class_weights[target]
    else:
        pixel_w = np.ones((h, w))

    with _quiet():
        shifted = logits.data - logits.data.max(axis=0, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    yy, xx = np.indices((h, w))
    nll = -logp[target, yy, xx]
    n_px = h * w
    out_data = np.asarray((pixel_w * nll).sum() / n_px)

    def backward_fn(g: Array) -> None:
        if not logits.requires_grad:
            return
        grad = np.exp(logp)
        grad[target, yy, xx] -= 1.0
        grad *= (pixel_w / n_px) * g
        logits.accumulate_grad(grad)

    return _node(out_data, (logits,), backward_fn, "cross_entropy_loss")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-finite-difference comparison."""

    label: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool
    detail: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status}  {self.label}: max rel error {self.max_rel_error:.3e}"
        if self.detail:
            line += f" ({self.detail})"
        return line


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               step: float = 1e-5, tol: float = 1e-4,
               rng: np.random.Generator | None = None,
               label: str = "grad_check",
               max_coords: int | None = None) -> GradCheckReport:
    """Compare the analytic gradient of f at x against central differences.

    f must be deterministic and differentiable at x. The output is reduced
    to a scalar through a fixed random projection, analytic gradients come
    from one backward pass, and each coordinate is perturbed by +-step.

    A coordinate that disagrees is re-examined with smaller steps and, if
    still failing, at a slightly jittered base point: a finite-difference
    window straddling a nondifferentiable point (a relu kink inside a
    composite) produces a spurious mismatch that moves with the window,
    while a genuine backward-rule bug persists. Only persistent mismatches
    count toward the reported error.

    max_coords, when set, bounds the work by probing a random subset of
    coordinates instead of every one (the analytic pass still covers all).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x.requires_grad = True
    original = x.data.copy()
    out0 = f(x)
    proj = rng.standard_normal(out0.shape)

    def loss_value() -> float:
        return float((f(x).data * proj).sum())

    def analytic_grad() -> Array:
        x.zero_grad()
        backward(sum_all(mul(f(x), Tensor(proj))))
        return x.grad.copy()

    def fd_coord(idx: tuple, h: float) -> float:
        base = x.data[idx]
        x.data[idx] = base + h
        hi = loss_value()
        x.data[idx] = base - h
        lo = loss_value()
        x.data[idx] = base
        return (hi - lo) / (2.0 * h)

    analytic = analytic_grad()
    if not np.all(np.isfinite(analytic)):
        idx = tuple(np.argwhere(~np.isfinite(analytic))[0])
        return GradCheckReport(label, math.inf, idx, False,
                               f"non-finite analytic gradient at {idx}")

    if max_coords is not None and x.size > max_coords:
        flat = rng.choice(x.size, size=max_coords, replace=False)
        coords = [np.unravel_index(i, x.shape) for i in flat]
    else:
        coords = list(np.ndindex(x.shape))

    max_err = 0.0
    worst: tuple[int, ...] = ()
    for idx in coords:
        err = _rel_error(analytic[idx], fd_coord(idx, step))
        if err > tol:
            # Shrink the window first; a kink inside it moves out.
            for shrink in (0.5, 0.25):
                err = min(err, _rel_error(analytic[idx], fd_coord(idx, step * shrink)))
                if err <= tol:
                    break
        if err > tol:
            # Re-check the same coordinate at a jittered base point.
            x.data = original + rng.normal(0.0, 1e-3, size=x.shape)
            jit_analytic = analytic_grad()
            err = min(err, _rel_error(jit_analytic[idx], fd_coord(idx, step)))
            x.data = original.copy()
        if err > max_err:
            max_err, worst = err, idx
    x.data = original
    return GradCheckReport(label, max_err, worst, max_err <= tol)
