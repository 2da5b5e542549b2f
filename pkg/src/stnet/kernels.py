"""Hot sampling kernels: batched bilinear gather/scatter over one pyramid level.

Nearly all non-BLAS compute of the attention happens in these loop nests, so
they are compiled with numba when it is available. The environment variable
STNET_BACKEND selects the path:

  auto  (default) use numba if importable, else the numpy fallback
  numba  require numba, error out if missing
  numpy  force the vectorized pure-numpy fallback

Both paths implement the same convention, pinned by tests:

  * pixel centers sit at integer coordinates (coordinate i addresses the
    center of cell i);
  * sampling blends the four surrounding cells and cells outside the map
    contribute zeros, so a point whose four neighbors all fall outside
    [-0.5, W-0.5] x [-0.5, H-0.5] yields exactly 0.

Array layout, per level:

  value    [T, M, D, H, W]   per-frame, per-head value slices
  locs     [N, M, T, K, 2]   sample points, (x, y) in level-pixel units
  weights  [N, M, T, K]      attention weights
  out      [N, M, D]         accumulator shared across levels
"""

from __future__ import annotations

import math
import os

import numpy as np

from .numerics import InputError

_ENV_VAR = "STNET_BACKEND"


# ---------------------------------------------------------------------------
# loop-nest implementations (numba source)

def _sample_fwd_loops(value, locs, weights, out):
    T, M, D, H, W = value.shape
    N = locs.shape[0]
    K = locs.shape[3]
    for q in range(N):
        for m in range(M):
            for t in range(T):
                for k in range(K):
                    x = locs[q, m, t, k, 0]
                    y = locs[q, m, t, k, 1]
                    if x <= -1.0 or y <= -1.0 or x >= W or y >= H:
                        continue
                    a = weights[q, m, t, k]
                    x0 = int(math.floor(x))
                    y0 = int(math.floor(y))
                    fx = x - x0
                    fy = y - y0
                    x1 = x0 + 1
                    y1 = y0 + 1
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    ok_x0 = 0 <= x0 < W
                    ok_x1 = 0 <= x1 < W
                    ok_y0 = 0 <= y0 < H
                    ok_y1 = 0 <= y1 < H
                    for d in range(D):
                        v = 0.0
                        if ok_y0 and ok_x0:
                            v += w00 * value[t, m, d, y0, x0]
                        if ok_y0 and ok_x1:
                            v += w01 * value[t, m, d, y0, x1]
                        if ok_y1 and ok_x0:
                            v += w10 * value[t, m, d, y1, x0]
                        if ok_y1 and ok_x1:
                            v += w11 * value[t, m, d, y1, x1]
                        out[q, m, d] += a * v


def _sample_bwd_loops(value, locs, weights, d_out, d_value, d_locs, d_weights):
    T, M, D, H, W = value.shape
    N = locs.shape[0]
    K = locs.shape[3]
    for q in range(N):
        for m in range(M):
            for t in range(T):
                for k in range(K):
                    x = locs[q, m, t, k, 0]
                    y = locs[q, m, t, k, 1]
                    if x <= -1.0 or y <= -1.0 or x >= W or y >= H:
                        continue
                    a = weights[q, m, t, k]
                    x0 = int(math.floor(x))
                    y0 = int(math.floor(y))
                    fx = x - x0
                    fy = y - y0
                    x1 = x0 + 1
                    y1 = y0 + 1
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    ok_x0 = 0 <= x0 < W
                    ok_x1 = 0 <= x1 < W
                    ok_y0 = 0 <= y0 < H
                    ok_y1 = 0 <= y1 < H
                    dw = 0.0
                    dx = 0.0
                    dy = 0.0
                    for d in range(D):
                        g = d_out[q, m, d]
                        ag = a * g
                        v00 = value[t, m, d, y0, x0] if (ok_y0 and ok_x0) else 0.0
                        v01 = value[t, m, d, y0, x1] if (ok_y0 and ok_x1) else 0.0
                        v10 = value[t, m, d, y1, x0] if (ok_y1 and ok_x0) else 0.0
                        v11 = value[t, m, d, y1, x1] if (ok_y1 and ok_x1) else 0.0
                        dw += g * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)
                        dx += ag * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                        dy += ag * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                        if ok_y0 and ok_x0:
                            d_value[t, m, d, y0, x0] += ag * w00
                        if ok_y0 and ok_x1:
                            d_value[t, m, d, y0, x1] += ag * w01
                        if ok_y1 and ok_x0:
                            d_value[t, m, d, y1, x0] += ag * w10
                        if ok_y1 and ok_x1:
                            d_value[t, m, d, y1, x1] += ag * w11
                    d_weights[q, m, t, k] += dw
                    d_locs[q, m, t, k, 0] += dx
                    d_locs[q, m, t, k, 1] += dy


# ---------------------------------------------------------------------------
# vectorized numpy fallback

_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _corner_weights(fy, fx, dy, dx):
    wy = fy if dy else (1.0 - fy)
    wx = fx if dx else (1.0 - fx)
    return wy * wx


def sample_fwd_numpy(value, locs, weights, out):
    T, M, D, H, W = value.shape
    x = locs[..., 0]
    y = locs[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    tt = np.broadcast_to(np.arange(T)[None, None, :, None], x.shape)
    mm = np.broadcast_to(np.arange(M)[None, :, None, None], x.shape)
    for dy, dx in _CORNERS:
        yi = y0 + dy
        xi = x0 + dx
        ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        yc = np.clip(yi, 0, H - 1)
        xc = np.clip(xi, 0, W - 1)
        v = value[tt, mm, :, yc, xc]  # [N, M, T, K, D]
        cw = weights * _corner_weights(fy, fx, dy, dx) * ok
        out += np.einsum("qmtk,qmtkd->qmd", cw, v)


def sample_bwd_numpy(value, locs, weights, d_out, d_value, d_locs, d_weights):
    T, M, D, H, W = value.shape
    x = locs[..., 0]
    y = locs[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    tt = np.broadcast_to(np.arange(T)[None, None, :, None], x.shape)
    mm = np.broadcast_to(np.arange(M)[None, :, None, None], x.shape)
    # points with all four neighbors outside contribute nothing, matching the
    # loop kernel's early `continue`
    alive = (x > -1.0) & (y > -1.0) & (x < W) & (y < H)
    scatter = np.zeros((T, M, H, W, D), dtype=d_value.dtype)
    for dy, dx in _CORNERS:
        yi = y0 + dy
        xi = x0 + dx
        ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W) & alive
        yc = np.clip(yi, 0, H - 1)
        xc = np.clip(xi, 0, W - 1)
        v = value[tt, mm, :, yc, xc]  # [N, M, T, K, D]
        gv = np.einsum("qmd,qmtkd->qmtk", d_out, v) * ok
        cw = _corner_weights(fy, fx, dy, dx)
        d_weights += cw * gv
        sy = 1.0 if dy else -1.0
        sx = 1.0 if dx else -1.0
        wx = fx if dx else (1.0 - fx)
        wy = fy if dy else (1.0 - fy)
        d_locs[..., 0] += weights * (sx * wy) * gv
        d_locs[..., 1] += weights * (sy * wx) * gv
        upd = (weights * cw * ok)[..., None] * d_out[:, :, None, None, :]
        np.add.at(scatter, (tt, mm, yc, xc), upd)
    d_value += scatter.transpose(0, 1, 4, 2, 3)


# ---------------------------------------------------------------------------
# backend selection

def jit_kernels():
    """numba-compiled (sample_fwd, sample_bwd); also used by the backend benchmark."""
    from numba import njit
    jit = njit(cache=True, fastmath=False)
    return jit(_sample_fwd_loops), jit(_sample_bwd_loops)


def _pick_backend():
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise InputError(f"{_ENV_VAR} must be auto, numba, or numpy (got {choice!r})")
    if choice == "numpy":
        return "numpy", sample_fwd_numpy, sample_bwd_numpy
    try:
        fwd, bwd = jit_kernels()
        return "numba", fwd, bwd
    except ImportError:
        if choice == "numba":
            raise
        return "numpy", sample_fwd_numpy, sample_bwd_numpy


BACKEND, sample_fwd, sample_bwd = _pick_backend()


# ---------------------------------------------------------------------------
# single-point reference op

def bilinear_sample(map_chw: np.ndarray, point) -> np.ndarray:
    """Sample a [C, H, W] map at one (x, y) point, zero padding outside."""
    x, y = float(point[0]), float(point[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InputError("bilinear_sample: non-finite sample point")
    if map_chw.ndim != 3:
        raise InputError("bilinear_sample: expected a [C, H, W] map")
    c, h, w = map_chw.shape
    out = np.zeros(c, dtype=map_chw.dtype)
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0
    for dy, dx in _CORNERS:
        yi = y0 + dy
        xi = x0 + dx
        if 0 <= yi < h and 0 <= xi < w:
            out += _corner_weights(fy, fx, dy, dx) * map_chw[:, yi, xi]
    return out
