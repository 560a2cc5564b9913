"""Benchmark the compiled conv kernels against the pure-numpy fallbacks.

Run as ``fovgen bench-kernels`` or ``python -m fovgen.bench``.
"""
from __future__ import annotations

import csv
import time

import numpy as np

from fovgen import kernels

SHAPES = [
    # (label, N, C, H, W, k, stride)
    ("in-conv 64px", 16, 3, 64, 64, 3, 1),
    ("shallow 64px", 16, 32, 64, 64, 3, 1),
    ("mid 32px", 16, 64, 32, 32, 3, 1),
    ("deep 16px", 16, 96, 16, 16, 3, 1),
    ("downsample", 16, 32, 64, 64, 3, 2),
]


def _time(fn, reps=5):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


def run(reps: int = 5):
    rows = []
    rng = np.random.default_rng(0)
    for label, n, c, h, w, k, stride in SHAPES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        pad = k // 2
        cols_np = kernels._im2col_np(x, k, k, stride, pad)
        row = {"case": label, "mb": x.nbytes * k * k / 1e6}
        row["im2col_numpy_ms"] = _time(lambda: kernels._im2col_np(x, k, k, stride, pad), reps)
        row["col2im_numpy_ms"] = _time(lambda: kernels._col2im_np(cols_np, x.shape, k, k, stride, pad), reps)
        if kernels.HAVE_COMPILED:
            out = np.empty_like(cols_np)
            acc = np.zeros_like(x)

            def c_im2col():
                kernels._ckernels.im2col(x, k, k, stride, pad, out)

            def c_col2im():
                acc.fill(0)
                kernels._ckernels.col2im(cols_np, k, k, stride, pad, acc)

            row["im2col_compiled_ms"] = _time(c_im2col, reps)
            row["col2im_compiled_ms"] = _time(c_col2im, reps)
            c_im2col()
            assert np.array_equal(out, cols_np), "backend outputs diverge"
        rows.append(row)
    return rows


def main(out_csv=None, reps: int = 5):
    rows = run(reps)
    cols = list(rows[0].keys())
    widths = [max(len(c), 18) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print(
            "  ".join(
                (f"{r[c]:.2f}" if isinstance(r[c], float) else str(r[c])).ljust(w)
                for c, w in zip(cols, widths)
            )
        )
    if not kernels.HAVE_COMPILED:
        print("compiled extension not built; only numpy fallback timed")
    if out_csv:
        with open(out_csv, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    return rows


if __name__ == "__main__":
    main()
