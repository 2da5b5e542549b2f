#!/usr/bin/env python3
"""Benchmark the numba-compiled sampling kernels against the numpy fallback.

Times the bilinear gather/scatter kernels on encoder-scale and decoder-scale
shapes, plus one full attention forward/backward through each backend
(selected via STNET_BACKEND in a subprocess-free way by calling the
implementations directly). Run:

    python3 benchmarks/backend_bench.py
"""

import time

import numpy as np

from stnet import kernels
from stnet.numerics import make_rng


def make_instance(rng, n_queries, frames, heads, head_dim, k_points, h, w):
    value = rng.standard_normal((frames, heads, head_dim, h, w)).astype(np.float32)
    locs = np.ascontiguousarray(
        rng.uniform(-1.0, max(h, w), (n_queries, heads, frames, k_points, 2))
    ).astype(np.float32)
    wgts = rng.uniform(0, 1, (n_queries, heads, frames, k_points)).astype(np.float32)
    d_out = rng.standard_normal((n_queries, heads, head_dim)).astype(np.float32)
    return value, locs, wgts, d_out


def time_call(fn, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_shape(label, inst, fwd, bwd):
    value, locs, wgts, d_out = inst
    out = np.zeros(d_out.shape, dtype=value.dtype)
    grads = (np.zeros_like(value), np.zeros_like(locs), np.zeros_like(wgts))
    fwd(value, locs, wgts, out)              # warm-up / JIT
    bwd(value, locs, wgts, d_out, *grads)
    t_fwd = time_call(lambda: fwd(value, locs, wgts, np.zeros_like(out)))
    t_bwd = time_call(lambda: bwd(value, locs, wgts, d_out,
                                  np.zeros_like(value), np.zeros_like(locs),
                                  np.zeros_like(wgts)))
    return t_fwd, t_bwd


def main():
    rng = make_rng(0)
    shapes = {
        # encoder-scale: every pixel of a 6-frame 2-level pyramid is a query
        "encoder 1920q": make_instance(rng, 1920, 6, 2, 16, 2, 16, 16),
        # decoder-scale: 20 object queries
        "decoder 20q": make_instance(rng, 20, 6, 2, 16, 2, 16, 16),
    }
    numba_fwd, numba_bwd = kernels.jit_kernels()
    backends = {
        "numba": (numba_fwd, numba_bwd),
        "numpy": (kernels.sample_fwd_numpy, kernels.sample_bwd_numpy),
    }
    print(f"active package backend: {kernels.BACKEND}")
    print(f"{'shape':<16} {'backend':<8} {'fwd ms':>10} {'bwd ms':>10}")
    speedups = []
    for label, inst in shapes.items():
        times = {}
        for name, (fwd, bwd) in backends.items():
            t_fwd, t_bwd = bench_shape(label, inst, fwd, bwd)
            times[name] = (t_fwd, t_bwd)
            print(f"{label:<16} {name:<8} {t_fwd * 1e3:>10.3f} {t_bwd * 1e3:>10.3f}")
        speedups.append((label,
                         times["numpy"][0] / times["numba"][0],
                         times["numpy"][1] / times["numba"][1]))
    for label, s_fwd, s_bwd in speedups:
        print(f"{label}: numba speedup {s_fwd:.1f}x fwd, {s_bwd:.1f}x bwd")


if __name__ == "__main__":
    main()
