#!/usr/bin/env python3
"""The gradient test-bench: randomized finite-difference audits.

Every differentiable op and every block has a registered suite entry that
draws random shapes and inputs, computes analytic gradients, and compares
them against central finite differences at 64-bit precision. This demo runs
a handful of entries, shows the report format, and demonstrates what a
failure looks like by demanding an impossible tolerance.
"""

from __future__ import annotations

from potseg import run_entry, run_suite, suite_report
from potseg.gradsuite import ENTRIES


def main() -> None:
    print(f"== {len(ENTRIES)} registered entries ==")
    print(", ".join(ENTRIES))

    print("\n== a few entries at standard settings (tol 1e-4) ==")
    results = run_suite(["matmul", "sigmoid", "conv2d", "cam", "msffm"],
                        trials=10, seed=0)
    print(suite_report(results), end="")

    print("\n== one entry in detail ==")
    result = run_entry("bilinear_upsample", trials=25, seed=1)
    print(f"{result.name}: {result.trials} trials, kind={result.kind}, "
          f"max rel error {result.max_rel_error:.3e}, "
          f"passed={result.passed}")

    print("\n== what failure looks like (tolerance set below float64 noise) ==")
    impossible = run_suite(["relu"], trials=2, tol=1e-18, seed=0)
    print(suite_report(impossible), end="")
    print("\nExit code 2 is what the CLI returns for the same outcome:")
    print("  potseg gradcheck --op relu --tol 1e-18")


if __name__ == "__main__":
    main()
