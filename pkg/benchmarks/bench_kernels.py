"""Timing comparison of the softmax kernels: pure numpy vs the compiled core.

Run with `python3 benchmarks/bench_kernels.py`. The shapes mirror the hot
paths: (H, M, N) attention blocks at the layer sides the denoiser uses, plus
the optimizer's repeated forward/vjp pair on the edited bottleneck maps.
"""

import importlib
import os
import sys
import time

import numpy as np

REPEATS = 5

# (label, H, w, N): w*w spatial queries over N prompt tokens
SHAPES = [
    ("d0  16x16 grid", 2, 16, 16),
    ("d1   8x8  grid", 2, 8, 16),
    ("d2   4x4  grid", 2, 4, 16),
    ("wide  batch", 8, 16, 64),
]


def load_backend(name):
    os.environ["ATTNREG_BACKEND"] = name
    for mod in [m for m in sys.modules if m.startswith("attnreg")]:
        del sys.modules[mod]
    kernels = importlib.import_module("attnreg._kernels")
    assert kernels.BACKEND == name, f"wanted {name}, got {kernels.BACKEND}"
    return kernels


def best_of(fn, repeats=REPEATS, inner=50):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - start) / inner)
    return best


def bench_backend(kernels):
    rows = {}
    rng = np.random.default_rng(0)
    for label, heads, w, n in SHAPES:
        x = rng.normal(size=(heads, w * w, n))
        a = kernels.softmax_scaled(x, 1.0 / np.sqrt(8.0))
        g = rng.normal(size=a.shape)
        fwd = best_of(lambda: kernels.softmax_scaled(x, 0.35))
        vjp = best_of(lambda: kernels.softmax_vjp(a, g))
        rows[label] = (fwd, vjp)
    return rows


def main():
    results = {}
    for name in ("numpy", "cython"):
        try:
            kernels = load_backend(name)
        except ImportError as exc:
            print(f"skipping {name}: {exc}")
            continue
        results[name] = bench_backend(kernels)

    if set(results) != {"numpy", "cython"}:
        for name, rows in results.items():
            for label, (fwd, vjp) in rows.items():
                print(f"{name:>6} {label}: softmax {fwd * 1e6:8.1f}us  vjp {vjp * 1e6:8.1f}us")
        return

    print(f"{'shape':<16} {'numpy fwd':>10} {'cython fwd':>11} {'speedup':>8}"
          f" {'numpy vjp':>11} {'cython vjp':>11} {'speedup':>8}")
    for label, _, _, _ in [(s[0], *s[1:]) for s in SHAPES]:
        nf, nv = results["numpy"][label]
        cf, cv = results["cython"][label]
        print(
            f"{label:<16} {nf * 1e6:9.1f}u {cf * 1e6:10.1f}u {nf / cf:7.2f}x"
            f" {nv * 1e6:10.1f}u {cv * 1e6:10.1f}u {nv / cv:7.2f}x"
        )


if __name__ == "__main__":
    main()
