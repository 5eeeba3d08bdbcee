#!/usr/bin/env python3
"""A walk through the tensor core: build a graph, differentiate it, check it.

The engine is deliberately small: float64 everywhere, eager evaluation, and
every op records a closure that pushes gradients back to its inputs. This
script builds a few graphs by hand, runs `backward`, and then lets
`grad_check` argue with central finite differences about the results.
"""

from __future__ import annotations

import numpy as np

from potseg import Parameter, Tensor, backward, grad_check
from potseg.autodiff import matmul, mul, relu, sigmoid, sum_all
from potseg.errors import NumericalError


def scalar_chain() -> None:
    print("== a tiny scalar chain ==")
    x = Parameter("x", np.array(3.0))
    # y = x * x + x  ->  dy/dx = 2x + 1 = 7 at x = 3
    y = mul(x, x) + x
    backward(y)
    print(f"y = x^2 + x at x=3    -> y = {y.data.item():.1f}, "
          f"dy/dx = {x.grad.item():.1f} (expect 7.0)")


def reuse_and_accumulation() -> None:
    print("\n== one tensor feeding two branches ==")
    w = Parameter("w", np.ones((2, 2)))
    a = matmul(w, Tensor(np.eye(2)))   # branch 1
    b = relu(w)                        # branch 2
    loss = sum_all(a + b)
    backward(loss)
    # both branches contribute: d(sum)/dw = 1 (matmul) + 1 (relu, w > 0)
    print(f"d(sum of both branches)/dw =\n{w.grad} (every entry 2.0)")


def checked_gradients() -> None:
    print("\n== finite-difference audit ==")
    rng = np.random.default_rng(7)

    def f(t: Tensor) -> Tensor:
        return sum_all(sigmoid(matmul(t, t)))

    x = Tensor(rng.normal(size=(3, 3)))
    report = grad_check(f, x, rng=rng, label="sigmoid(matmul(x, x))")
    print(report)

    def kinked(t: Tensor) -> Tensor:
        return sum_all(relu(t))

    x = Tensor(rng.normal(size=(4, 4)))
    report = grad_check(kinked, x, rng=rng, label="relu near its kink")
    print(report)


def guarded_arithmetic() -> None:
    print("\n== the overflow guard ==")
    huge = Tensor(np.array([1e300]))
    try:
        mul(huge, huge)
    except NumericalError as e:
        print(f"mul(1e300, 1e300) raised NumericalError: {e}")


def main() -> None:
    scalar_chain()
    reuse_and_accumulation()
    checked_gradients()
    guarded_arithmetic()


if __name__ == "__main__":
    main()
