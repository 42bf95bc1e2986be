"""Benchmark the convolution hot path: jit kernels vs pure numpy."""

from __future__ import annotations

import time

import numpy as np

from . import kernels_numpy

DEFAULT_CASES = (
    # (N, Cin, H, W, Cout, k)
    (1, 8, 64, 64, 16, 3),
    (4, 16, 32, 32, 32, 3),
    (1, 32, 96, 96, 32, 3),
)


def _load_numba():
    try:
        from . import kernels_numba
        return kernels_numba
    except ImportError:
        return None


def _time(fn, repeats):
    fn()  # warmup (includes jit compilation)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run_benchmark(cases=DEFAULT_CASES, repeats=5, seed=0):
    """Time forward and backward per backend; returns result rows."""
    rng = np.random.default_rng(seed)
    numba_kernels = _load_numba()
    rows = []
    for n, c_in, h, w, c_out, k in cases:
        pad = (k - 1) // 2
        xp = rng.standard_normal((n, c_in, h + 2 * pad, w + 2 * pad)).astype(np.float32)
        weight = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
        bias = rng.standard_normal(c_out).astype(np.float32)
        up = rng.standard_normal((n, c_out, h, w)).astype(np.float32)

        for op, np_fn, nb_fn in (
            ("forward",
             lambda: kernels_numpy.conv2d_forward(xp, weight, bias),
             (lambda: numba_kernels.conv2d_forward(xp, weight, bias))
             if numba_kernels else None),
            ("backward",
             lambda: kernels_numpy.conv2d_backward(up, xp, weight),
             (lambda: numba_kernels.conv2d_backward(up, xp, weight))
             if numba_kernels else None),
        ):
            row = {
                "case": f"{n}x{c_in}x{h}x{w}->{c_out} k{k}",
                "op": op,
                "numpy_ms": _time(np_fn, repeats) * 1e3,
                "numba_ms": _time(nb_fn, repeats) * 1e3 if nb_fn else None,
            }
            rows.append(row)
    return rows


def format_table(rows):
    lines = [f"{'case':>22s}  {'op':>8s}  {'numpy_ms':>10s}  "
             f"{'numba_ms':>10s}  {'speedup':>8s}"]
    for r in rows:
        if r["numba_ms"] is None:
            nb = "n/a"
            speedup = "n/a"
        else:
            nb = f"{r['numba_ms']:.3f}"
            speedup = f"{r['numpy_ms'] / r['numba_ms']:.2f}x"
        lines.append(f"{r['case']:>22s}  {r['op']:>8s}  "
                     f"{r['numpy_ms']:>10.3f}  {nb:>10s}  {speedup:>8s}")
    return "\n".join(lines)
