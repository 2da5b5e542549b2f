"""Spatial-temporal deformable attention: forward pass and analytic backward.

Each query carries a feature vector and a normalized 2-D reference point.
Per head it attends to K learned offset locations on every pyramid level of
every frame; attention weights are softmax-normalized jointly across the
(frame, level, point) axis, so they sum to one per (query, head). Values are
produced by a shared projection of the feature maps, split channelwise into
head slices, and the concatenated head outputs go through a final output
projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import (InputError, LinearLayer, linear_backward, linear_forward,
                       require, softmax, softmax_backward, xavier_linear,
                       zeros_linear)

# T frames, each a list of L maps shaped [C, H_l, W_l]
MultiScaleFeatures = list


@dataclass
class QueryBatch:
    features: np.ndarray    # [N, C]
    ref_points: np.ndarray  # [N, 2], (x, y) normalized to [0, 1]


@dataclass
class StdaParams:
    heads: int
    points: int
    frames: int
    levels: int
    channels: int
    value_proj: LinearLayer   # C -> C, shared value projection
    offset_net: LinearLayer   # C -> M*T*L*K*2
    weight_net: LinearLayer   # C -> M*T*L*K
    output_proj: LinearLayer  # C -> C

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class StdaGradients:
    params: StdaParams                 # gradient arrays, same structure
    query_features: np.ndarray         # [N, C]
    ref_points: np.ndarray             # [N, 2]
    features: MultiScaleFeatures       # matches the input pyramids


@dataclass
class StdaCache:
    params: StdaParams
    queries: QueryBatch
    pixels: list            # [T][L] value_proj inputs, [H_l*W_l, C]
    values: list            # per level, [T, M, D, H_l, W_l]
    locs: list               # per level, [N, M, T, K, 2]
    attn: np.ndarray         # [N, M, T, L, K]
    head_cat: np.ndarray     # [N, C], input to output_proj
    level_dims: list         # [(H_l, W_l)]


def init_stda(rng: np.random.Generator, channels: int, heads: int, points: int,
              frames: int, levels: int, dtype=np.float32) -> StdaParams:
    """Initialize one attention layer.

    offset_net starts with zero weights and biases laid out as K points on a
    unit-pixel ring, rotated per head, so early sampling probes a small
    neighborhood of the reference point. weight_net starts at zero, i.e.
    uniform attention; both projections use fan-based uniform init.
    """
    require(channels % heads == 0, "init_stda: channels must divide evenly over heads")
    offset_net = zeros_linear(channels, heads * frames * levels * points * 2, dtype)
    ring = offset_net.bias.reshape(heads, frames, levels, points, 2)
    for m in range(heads):
        for k in range(points):
            ang = 2.0 * math.pi * (k / points + m / (heads * points))
            ring[m, :, :, k, 0] = math.cos(ang)
            ring[m, :, :, k, 1] = math.sin(ang)
    return StdaParams(
        heads=heads, points=points, frames=frames, levels=levels, channels=channels,
        value_proj=xavier_linear(rng, channels, channels, dtype),
        offset_net=offset_net,
        weight_net=zeros_linear(channels, heads * frames * levels * points, dtype),
        output_proj=xavier_linear(rng, channels, channels, dtype),
    )


def normalize_to_level(p: np.ndarray, level_dims) -> np.ndarray:
    """Map normalized (x, y) in [0, 1]^2 to level-pixel coordinates.

    Under the pixel-center convention 0 and 1 land on the outer edges of the
    grid: x_pix = x * W - 0.5, y_pix = y * H - 0.5.
    """
    h, w = level_dims
    p = np.asarray(p)
    return np.stack((p[..., 0] * w - 0.5, p[..., 1] * h - 0.5), axis=-1)


def check_features(params: StdaParams, feats: MultiScaleFeatures) -> list:
    """Validate pyramid structure against params; returns [(H_l, W_l)]."""
    require(len(feats) == params.frames,
            f"stda: expected {params.frames} frames, got {len(feats)}")
    dims = []
    for l in range(params.levels):
        c, h, w = feats[0][l].shape
        require(c == params.channels, f"stda: level {l} has {c} channels, expected {params.channels}")
        dims.append((h, w))
    for t, pyramid in enumerate(feats):
        require(len(pyramid) == params.levels,
                f"stda: frame {t} has {len(pyramid)} levels, expected {params.levels}")
        for l, fmap in enumerate(pyramid):
            require(fmap.shape == (params.channels,) + dims[l],
                    f"stda: frame {t} level {l} shape {fmap.shape} inconsistent")
    return dims


def _check_queries(params: StdaParams, queries: QueryBatch) -> int:
    require(queries.features.ndim == 2 and queries.features.shape[1] == params.channels,
            "stda: query features must be [N, C] with matching channel count")
    require(queries.ref_points.shape == (queries.features.shape[0], 2),
            "stda: reference points must be [N, 2]")
    return queries.features.shape[0]


def predict_offsets(params: StdaParams, queries: QueryBatch) -> np.ndarray:
    """Raw sampling offsets [N, M, T, L, K, 2], in level-pixel units, unbounded."""
    n = _check_queries(params, queries)
    raw = linear_forward(params.offset_net, queries.features)
    return raw.reshape(n, params.heads, params.frames, params.levels, params.points, 2)


def predict_attention_weights(params: StdaParams, queries: QueryBatch) -> np.ndarray:
    """Attention weights [N, M, T, L, K], softmax over the joint T*L*K axis."""
    n = _check_queries(params, queries)
    raw = linear_forward(params.weight_net, queries.features)
    flat = raw.reshape(n, params.heads, params.frames * params.levels * params.points)
    return softmax(flat).reshape(n, params.heads, params.frames, params.levels,
                                 params.points)


def stda_forward(params: StdaParams, queries: QueryBatch,
                 feats: MultiScaleFeatures) -> tuple[np.ndarray, StdaCache]:
    """Returns (output [N, C], cache for the backward pass)."""
    n = _check_queries(params, queries)
    dims = check_features(params, feats)
    m, d = params.heads, params.head_dim
    t_frames, levels, k_pts = params.frames, params.levels, params.points
    dtype = queries.features.dtype

    offsets = predict_offsets(params, queries)
    attn = predict_attention_weights(params, queries)

    pixels = []
    values = []
    for l, (h, w) in enumerate(dims):
        per_frame_pix = []
        stack = np.empty((t_frames, m, d, h, w), dtype=dtype)
        for t in range(t_frames):
            pix = np.ascontiguousarray(feats[t][l].transpose(1, 2, 0).reshape(h * w, -1))
            per_frame_pix.append(pix)
            proj = linear_forward(params.value_proj, pix)
            stack[t] = proj.reshape(h, w, m, d).transpose(2, 3, 0, 1)
        pixels.append(per_frame_pix)
        values.append(stack)
    # pixels indexed [l][t]; transpose to [t][l] for the cache contract
    pixels = [[pixels[l][t] for l in range(levels)] for t in range(t_frames)]

    out_heads = np.zeros((n, m, d), dtype=dtype)
    locs = []
    for l, (h, w) in enumerate(dims):
        base = normalize_to_level(queries.ref_points, (h, w)).astype(dtype)
        loc = base[:, None, None, None, :] + offsets[:, :, :, l, :, :]
        loc = np.ascontiguousarray(loc)
        if not np.isfinite(loc).all():
            raise InputError("stda_forward: non-finite sampling location")
        wgt = np.ascontiguousarray(attn[:, :, :, l, :])
        kernels.sample_fwd(values[l], loc, wgt, out_heads)
        locs.append(loc)

    head_cat = out_heads.reshape(n, params.channels)
    out = linear_forward(params.output_proj, head_cat)
    cache = StdaCache(params=params, queries=queries, pixels=pixels, values=values,
                      locs=locs, attn=attn, head_cat=head_cat, level_dims=dims)
    return out, cache


def stda_backward(cache: StdaCache, d_out: np.ndarray) -> StdaGradients:
    """Analytic VJP of stda_forward.

    Offset gradients flow through the spatial derivative of the bilinear
    interpolation; weight gradients flow through the joint softmax Jacobian;
    reference-point gradients pick up the per-level coordinate scaling.
    """
    params = cache.params
    n = cache.head_cat.shape[0]
    require(d_out.shape == (n, params.channels),
            f"stda_backward: d_out shape {d_out.shape} does not match cache ({n}, {params.channels})")
    m, d = params.heads, params.head_dim
    t_frames, levels, k_pts = params.frames, params.levels, params.points
    dtype = cache.head_cat.dtype

    d_head_cat, g_output = linear_backward(params.output_proj, cache.head_cat, d_out)
    d_heads = np.ascontiguousarray(d_head_cat.reshape(n, m, d))

    d_attn = np.zeros_like(cache.attn)
    d_offsets = np.zeros((n, m, t_frames, levels, k_pts, 2), dtype=dtype)
    d_ref = np.zeros((n, 2), dtype=dtype)
    d_feats = [[None] * levels for _ in range(t_frames)]
    g_value_w = np.zeros_like(params.value_proj.weight)
    g_value_b = np.zeros_like(params.value_proj.bias)

    for l, (h, w) in enumerate(cache.level_dims):
        value = cache.values[l]
        loc = cache.locs[l]
        wgt = np.ascontiguousarray(cache.attn[:, :, :, l, :])
        d_value = np.zeros_like(value)
        d_loc = np.zeros_like(loc)
        d_wgt = np.zeros_like(wgt)
        kernels.sample_bwd(value, loc, wgt, d_heads, d_value, d_loc, d_wgt)
        d_attn[:, :, :, l, :] = d_wgt
        d_offsets[:, :, :, l, :, :] = d_loc
        d_ref[:, 0] += d_loc[..., 0].sum(axis=(1, 2, 3)) * w
        d_ref[:, 1] += d_loc[..., 1].sum(axis=(1, 2, 3)) * h
        for t in range(t_frames):
            d_proj = d_value[t].transpose(2, 3, 0, 1).reshape(h * w, params.channels)
            d_pix, g_vp = linear_backward(params.value_proj, cache.pixels[t][l], d_proj)
            g_value_w += g_vp.weight
            g_value_b += g_vp.bias
            d_feats[t][l] = np.ascontiguousarray(
                d_pix.reshape(h, w, params.channels).transpose(2, 0, 1))

    flat_attn = cache.attn.reshape(n, m, t_frames * levels * k_pts)
    d_flat = d_attn.reshape(n, m, t_frames * levels * k_pts)
    d_logits = softmax_backward(flat_attn, d_flat).reshape(n, -1)
    d_q_weights, g_weight_net = linear_backward(params.weight_net,
                                                cache.queries.features, d_logits)
    d_q_offsets, g_offset_net = linear_backward(params.offset_net,
                                                cache.queries.features,
                                                d_offsets.reshape(n, -1))

    grads = StdaParams(
        heads=m, points=k_pts, frames=t_frames, levels=levels, channels=params.channels,
        value_proj=LinearLayer(g_value_w, g_value_b),
        offset_net=g_offset_net,
        weight_net=g_weight_net,
        output_proj=g_output,
    )
    return StdaGradients(params=grads,
                         query_features=d_q_weights + d_q_offsets,
                         ref_points=d_ref,
                         features=d_feats)
