"""Compare the compiled and NumPy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--sizes 1000,32561,200000] [--repeat 7]

Prints the median wall time per call for each kernel, backend and size, the
speed-up of the compiled backend, and the largest disagreement between the two.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from vfladmm import _kernels_py
from vfladmm.subsolvers import Z_MAX_ITER, Z_TOL

try:
    from vfladmm import _kernels as _compiled
except ImportError:
    _compiled = None


def _inputs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, 3.0, n)
    labels = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    y = rng.uniform(-1.0, 1.0, n) / n
    return z, labels, y


def _calls(impl, n: int):
    z, labels, y = _inputs(n)
    scale, rho = 1.0 / n, 0.25
    return {
        "loss": lambda: impl.logistic_loss(z, labels, scale),
        "grad": lambda: impl.logistic_grad(z, labels, scale),
        "curv": lambda: impl.logistic_curv(z, labels, scale),
        "zstep": lambda: impl.zstep(z, y, labels, rho, scale, Z_TOL, Z_MAX_ITER),
    }


def _median_seconds(fn, repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return float(np.median(timer.repeat(repeat=repeat, number=number))) / number


def compare(sizes, repeat: int = 5) -> list[dict]:
    """One row per (kernel, size) with timings of both backends and their max difference."""
    rows = []
    for n in sizes:
        py = _calls(_kernels_py, n)
        cy = _calls(_compiled, n) if _compiled is not None else {}
        for name, fn in py.items():
            row = {"kernel": name, "n": n, "python_s": _median_seconds(fn, repeat)}
            if name in cy:
                row["cython_s"] = _median_seconds(cy[name], repeat)
                row["speedup"] = row["python_s"] / row["cython_s"]
                row["max_abs_diff"] = float(np.max(np.abs(np.asarray(fn()) - np.asarray(cy[name]()))))
            rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1000,32561,200000")
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    if _compiled is None:
        print("compiled extension not built; timing the NumPy backend only")
    print(f"{'kernel':>6} {'n':>8} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max diff':>9}")
    for r in compare(sizes, args.repeat):
        cy = f"{r['cython_s'] * 1e3:10.3f} {r['speedup']:8.2f} {r['max_abs_diff']:9.1e}" if "cython_s" in r else ""
        print(f"{r['kernel']:>6} {r['n']:>8} {r['python_s'] * 1e3:10.3f} {cy}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
