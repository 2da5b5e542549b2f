"""The detection network: conv stem, deformable encoder/decoder, heads.

Every frame goes through a small strided conv stem that replaces a big
pretrained backbone and yields an L-level feature pyramid. The encoder treats
every pixel of every frame's every level as one query (reference point = its
own pixel center, plus a learned per-level embedding) and stacks
attention+FFN layers. The decoder runs learnable object queries through
self-attention, cross-attention against all frames' pyramids, and an FFN,
then a linear classifier and a sigmoid box head produce per-query detections.

All forward functions return a cache consumed by the matching backward; the
net-level backward assembles a NetParams-shaped gradient tree.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import NetConfig
from .numerics import (InputError, LinearLayer, linear_backward, linear_forward,
                       layer_norm_backward, layer_norm_fwd, relu, relu_backward,
                       require, sigmoid, sigmoid_backward, softmax,
                       softmax_backward, tree_add_, tree_arrays, tree_zeros_like,
                       xavier_linear)
from .stda import (QueryBatch, StdaParams, init_stda, stda_backward, stda_forward)


@dataclass
class PassCounters:
    """Instrumentation for the inference strategies: one tick per clip-level pass."""
    stem: int = 0
    encoder: int = 0
    decoder: int = 0


@dataclass
class Detection:
    class_logits: np.ndarray  # [N, num_classes + 1]; last column is "no object"
    boxes: np.ndarray         # [N, 4] normalized (cx, cy, w, h), sigmoid-bounded


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvLayer:
    weight: np.ndarray  # [C_out, C_in, k, k]
    bias: np.ndarray    # [C_out]
    stride: int
    pad: int


def xavier_conv(rng, c_in, c_out, k, stride, pad, dtype) -> ConvLayer:
    fan_in = c_in * k * k
    fan_out = c_out * k * k
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-limit, limit, size=(c_out, c_in, k, k)).astype(dtype)
    return ConvLayer(weight, np.zeros(c_out, dtype=dtype), stride, pad)


def conv_forward(layer: ConvLayer, x: np.ndarray):
    c_out, c_in, kh, kw = layer.weight.shape
    require(x.ndim == 3 and x.shape[0] == c_in,
            f"conv_forward: expected [{c_in}, H, W] input, got {x.shape}")
    s, p = layer.stride, layer.pad
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    h_out = (x.shape[1] + 2 * p - kh) // s + 1
    w_out = (x.shape[2] + 2 * p - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    patches = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(
        h_out * w_out, c_in * kh * kw)
    flat = patches @ layer.weight.reshape(c_out, -1).T + layer.bias
    y = flat.reshape(h_out, w_out, c_out).transpose(2, 0, 1)
    return y, (patches, x.shape, (h_out, w_out))


def conv_backward(layer: ConvLayer, cache, d_y: np.ndarray):
    patches, x_shape, (h_out, w_out) = cache
    c_out, c_in, kh, kw = layer.weight.shape
    s, p = layer.stride, layer.pad
    d_flat = d_y.transpose(1, 2, 0).reshape(h_out * w_out, c_out)
    g_w = (d_flat.T @ patches).reshape(layer.weight.shape)
    g_b = d_flat.sum(axis=0)
    d_patches = (d_flat @ layer.weight.reshape(c_out, -1)).reshape(
        h_out, w_out, c_in, kh, kw)
    d_xp = np.zeros((c_in, x_shape[1] + 2 * p, x_shape[2] + 2 * p), dtype=d_y.dtype)
    for i in range(kh):
        for j in range(kw):
            d_xp[:, i:i + s * h_out:s, j:j + s * w_out:s] += \
                d_patches[:, :, :, i, j].transpose(2, 0, 1)
    d_x = d_xp[:, p:p + x_shape[1], p:p + x_shape[2]]
    return d_x, ConvLayer(g_w, g_b, s, p)


# ---------------------------------------------------------------------------
# conv stem

@dataclass
class StemStage:
    conv: ConvLayer
    proj: LinearLayer  # 1x1 projection applied per pixel


@dataclass
class StemParams:
    stages: list


def init_stem(rng, levels: int, channels: int, dtype=np.float32) -> StemParams:
    stages = []
    for l in range(levels):
        if l == 0:
            conv = xavier_conv(rng, 1, channels, k=7, stride=4, pad=3, dtype=dtype)
        else:
            conv = xavier_conv(rng, channels, channels, k=3, stride=2, pad=1, dtype=dtype)
        stages.append(StemStage(conv, xavier_linear(rng, channels, channels, dtype)))
    return StemParams(stages)


def stem_forward(stem: StemParams, frame: np.ndarray):
    """frame [1, H, W] -> pyramid of L maps [C, H_l, W_l]; strides 4, 8, ..."""
    levels = len(stem.stages)
    require(frame.ndim == 3 and frame.shape[0] == 1,
            f"stem_forward: expected [1, H, W] frame, got {frame.shape}")
    div = 2 ** (levels + 1)
    require(frame.shape[1] % div == 0 and frame.shape[2] % div == 0,
            f"stem_forward: frame dims {frame.shape[1:]} must be divisible by {div}")
    x = frame
    maps, caches = [], []
    for stage in stem.stages:
        pre, conv_cache = conv_forward(stage.conv, x)
        act = relu(pre)
        c, h, w = act.shape
        pix = act.transpose(1, 2, 0).reshape(h * w, c)
        proj = linear_forward(stage.proj, pix)
        fmap = proj.reshape(h, w, -1).transpose(2, 0, 1)
        maps.append(fmap)
        caches.append((conv_cache, pre, pix))
        x = fmap
    return maps, caches


def stem_backward(stem: StemParams, caches, d_maps):
    """d_maps: per-level gradients; returns (d_frame, StemParams gradients)."""
    grads = []
    d_next = None
    for stage, (conv_cache, pre, pix), d_map in zip(
            reversed(stem.stages), reversed(caches), reversed(d_maps)):
        d_fmap = d_map if d_next is None else d_map + d_next
        c, h, w = d_fmap.shape
        d_proj = d_fmap.transpose(1, 2, 0).reshape(h * w, c)
        d_pix, g_proj = linear_backward(stage.proj, pix, d_proj)
        d_act = d_pix.reshape(h, w, -1).transpose(2, 0, 1)
        d_pre = relu_backward(pre, d_act)
        d_next, g_conv = conv_backward(stage.conv, conv_cache, d_pre)
        grads.append(StemStage(g_conv, g_proj))
    grads.reverse()
    return d_next, StemParams(grads)


# ---------------------------------------------------------------------------
# self-attention and FFN

@dataclass
class SelfAttentionParams:
    heads: int
    q_proj: LinearLayer
    k_proj: LinearLayer
    v_proj: LinearLayer
    out_proj: LinearLayer


def init_self_attention(rng, channels, heads, dtype=np.float32) -> SelfAttentionParams:
    require(channels % heads == 0, "self_attention: channels must divide evenly over heads")
    mk = lambda: xavier_linear(rng, channels, channels, dtype)
    return SelfAttentionParams(heads, mk(), mk(), mk(), mk())


def self_attention(params: SelfAttentionParams, x: np.ndarray):
    """Scaled dot-product attention over the row axis of x [N, C]."""
    n, c = x.shape
    m = params.heads
    dh = c // m
    scale = 1.0 / math.sqrt(dh)
    q = linear_forward(params.q_proj, x).reshape(n, m, dh).transpose(1, 0, 2)
    k = linear_forward(params.k_proj, x).reshape(n, m, dh).transpose(1, 0, 2)
    v = linear_forward(params.v_proj, x).reshape(n, m, dh).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    attn = softmax(scores)
    ctx = attn @ v
    cat = np.ascontiguousarray(ctx.transpose(1, 0, 2)).reshape(n, c)
    y = linear_forward(params.out_proj, cat)
    return y, (x, q, k, v, attn, cat, scale)


def self_attention_backward(params: SelfAttentionParams, cache, d_y: np.ndarray):
    x, q, k, v, attn, cat, scale = cache
    n, c = x.shape
    m = params.heads
    dh = c // m
    d_cat, g_out = linear_backward(params.out_proj, cat, d_y)
    d_ctx = d_cat.reshape(n, m, dh).transpose(1, 0, 2)
    d_attn = d_ctx @ v.transpose(0, 2, 1)
    d_v = attn.transpose(0, 2, 1) @ d_ctx
    d_scores = softmax_backward(attn, d_attn) * scale
    d_q = d_scores @ k
    d_k = d_scores.transpose(0, 2, 1) @ q
    unhead = lambda a: np.ascontiguousarray(a.transpose(1, 0, 2)).reshape(n, c)
    d_x_q, g_q = linear_backward(params.q_proj, x, unhead(d_q))
    d_x_k, g_k = linear_backward(params.k_proj, x, unhead(d_k))
    d_x_v, g_v = linear_backward(params.v_proj, x, unhead(d_v))
    d_x = d_x_q + d_x_k + d_x_v
    return d_x, SelfAttentionParams(m, g_q, g_k, g_v, g_out)


@dataclass
class FfnParams:
    lin1: LinearLayer
    lin2: LinearLayer


def init_ffn(rng, channels, hidden, dtype=np.float32) -> FfnParams:
    return FfnParams(xavier_linear(rng, channels, hidden, dtype),
                     xavier_linear(rng, hidden, channels, dtype))


def ffn_forward(params: FfnParams, x: np.ndarray):
    h = linear_forward(params.lin1, x)
    a = relu(h)
    return linear_forward(params.lin2, a), (x, h, a)


def ffn_backward(params: FfnParams, cache, d_y: np.ndarray):
    x, h, a = cache
    d_a, g2 = linear_backward(params.lin2, a, d_y)
    d_h = relu_backward(h, d_a)
    d_x, g1 = linear_backward(params.lin1, x, d_h)
    return d_x, FfnParams(g1, g2)


@dataclass
class NormParams:
    gain: np.ndarray
    shift: np.ndarray


def init_norm(channels, dtype=np.float32) -> NormParams:
    return NormParams(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype))


# ---------------------------------------------------------------------------
# flattening between pyramids and query rows

def flatten_pyramids(pyramids) -> np.ndarray:
    """Stack every pixel of every frame's every level into rows [N_q, C].

    Row order: frame-major, then level, then row-major pixels.
    """
    rows = []
    for pyramid in pyramids:
        for fmap in pyramid:
            c, h, w = fmap.shape
            rows.append(fmap.transpose(1, 2, 0).reshape(h * w, c))
    return np.concatenate(rows, axis=0)


def unflatten_pyramids(flat: np.ndarray, frames: int, dims) -> list:
    out = []
    pos = 0
    c = flat.shape[1]
    for _ in range(frames):
        pyramid = []
        for h, w in dims:
            chunk = flat[pos:pos + h * w]
            pyramid.append(np.ascontiguousarray(chunk.reshape(h, w, c).transpose(2, 0, 1)))
            pos += h * w
        out.append(pyramid)
    return out


def encoder_ref_points(frames: int, dims, dtype) -> np.ndarray:
    """Normalized pixel-center reference point for every flattened query row."""
    per_frame = []
    for h, w in dims:
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        px = (xs.reshape(-1) + 0.5) / w
        py = (ys.reshape(-1) + 0.5) / h
        per_frame.append(np.stack((px, py), axis=1))
    one = np.concatenate(per_frame, axis=0)
    return np.tile(one, (frames, 1)).astype(dtype)


def encoder_level_ids(frames: int, dims) -> np.ndarray:
    ids = np.concatenate([np.full(h * w, l, dtype=np.int64)
                          for l, (h, w) in enumerate(dims)])
    return np.tile(ids, frames)


# ---------------------------------------------------------------------------
# encoder

@dataclass
class EncoderLayerParams:
    stda: StdaParams
    norm1: NormParams
    ffn: FfnParams
    norm2: NormParams


def init_encoder_layer(rng, cfg: NetConfig, dtype) -> EncoderLayerParams:
    return EncoderLayerParams(
        stda=init_stda(rng, cfg.channels, cfg.heads, cfg.points, cfg.frames,
                       cfg.levels, dtype),
        norm1=init_norm(cfg.channels, dtype),
        ffn=init_ffn(rng, cfg.channels, cfg.ffn_dim, dtype),
        norm2=init_norm(cfg.channels, dtype),
    )


def encoder_forward(cfg: NetConfig, net: "NetParams", pyramids,
                    counters: PassCounters | None = None):
    """Fuse the T input pyramids; output pyramids keep the input shapes."""
    require(len(pyramids) == cfg.frames,
            f"encoder_forward: expected {cfg.frames} frames, got {len(pyramids)}")
    dims = [(m.shape[1], m.shape[2]) for m in pyramids[0]]
    x = flatten_pyramids(pyramids)
    dtype = x.dtype
    refs = encoder_ref_points(cfg.frames, dims, dtype)
    lvl = encoder_level_ids(cfg.frames, dims)
    layer_caches = []
    for layer in net.encoder:
        q_feat = x + net.level_embed[lvl]
        feats = unflatten_pyramids(x, cfg.frames, dims)
        s, s_cache = stda_forward(layer.stda, QueryBatch(q_feat, refs), feats)
        z1 = x + s
        y1, n1_cache = layer_norm_fwd(z1, layer.norm1.gain, layer.norm1.shift)
        f, f_cache = ffn_forward(layer.ffn, y1)
        z2 = y1 + f
        y2, n2_cache = layer_norm_fwd(z2, layer.norm2.gain, layer.norm2.shift)
        layer_caches.append((s_cache, n1_cache, f_cache, n2_cache))
        x = y2
    if counters is not None:
        counters.encoder += 1
    return unflatten_pyramids(x, cfg.frames, dims), (dims, lvl, layer_caches)


def encoder_backward(cfg: NetConfig, net: "NetParams", cache, d_pyramids):
    """Returns (d_input_pyramids, per-layer grads, level_embed grad)."""
    dims, lvl, layer_caches = cache
    d_x = flatten_pyramids(d_pyramids)
    layer_grads = [None] * len(net.encoder)
    g_level = np.zeros_like(net.level_embed)
    for i in range(len(net.encoder) - 1, -1, -1):
        layer = net.encoder[i]
        s_cache, n1_cache, f_cache, n2_cache = layer_caches[i]
        d_z2, g_gain2, g_shift2 = layer_norm_backward(n2_cache, layer.norm2.gain, d_x)
        d_ffn_in, g_ffn = ffn_backward(layer.ffn, f_cache, d_z2)
        d_y1 = d_z2 + d_ffn_in
        d_z1, g_gain1, g_shift1 = layer_norm_backward(n1_cache, layer.norm1.gain, d_y1)
        sg = stda_backward(s_cache, d_z1)
        d_x = d_z1 + sg.query_features + flatten_pyramids(sg.features)
        np.add.at(g_level, lvl, sg.query_features)
        layer_grads[i] = EncoderLayerParams(
            stda=sg.params,
            norm1=NormParams(g_gain1, g_shift1),
            ffn=g_ffn,
            norm2=NormParams(g_gain2, g_shift2),
        )
    return unflatten_pyramids(d_x, cfg.frames, dims), layer_grads, g_level


# ---------------------------------------------------------------------------
# decoder

@dataclass
class DecoderLayerParams:
    self_attn: SelfAttentionParams
    norm1: NormParams
    stda: StdaParams
    norm2: NormParams
    ffn: FfnParams
    norm3: NormParams


def init_decoder_layer(rng, cfg: NetConfig, dtype) -> DecoderLayerParams:
    return DecoderLayerParams(
        self_attn=init_self_attention(rng, cfg.channels, cfg.heads, dtype),
        norm1=init_norm(cfg.channels, dtype),
        stda=init_stda(rng, cfg.channels, cfg.heads, cfg.points, cfg.frames,
                       cfg.levels, dtype),
        norm2=init_norm(cfg.channels, dtype),
        ffn=init_ffn(rng, cfg.channels, cfg.ffn_dim, dtype),
        norm3=init_norm(cfg.channels, dtype),
    )


def decoder_forward(cfg: NetConfig, net: "NetParams", enc_pyramids,
                    queries: np.ndarray | None = None,
                    counters: PassCounters | None = None):
    """Object queries -> Detection. Reference points come from the initial
    query embeddings (linear + sigmoid) and stay fixed across layers."""
    x0 = net.query_embed if queries is None else queries
    require(x0.shape == (cfg.num_queries, cfg.channels),
            f"decoder_forward: queries shape {x0.shape} does not match config")
    ref_logits = linear_forward(net.ref_head, x0)
    refs = sigmoid(ref_logits)
    x = x0
    layer_caches = []
    for layer in net.decoder:
        sa, sa_cache = self_attention(layer.self_attn, x)
        z1 = x + sa
        y1, n1_cache = layer_norm_fwd(z1, layer.norm1.gain, layer.norm1.shift)
        cr, cr_cache = stda_forward(layer.stda, QueryBatch(y1, refs), enc_pyramids)
        z2 = y1 + cr
        y2, n2_cache = layer_norm_fwd(z2, layer.norm2.gain, layer.norm2.shift)
        f, f_cache = ffn_forward(layer.ffn, y2)
        z3 = y2 + f
        y3, n3_cache = layer_norm_fwd(z3, layer.norm3.gain, layer.norm3.shift)
        layer_caches.append((sa_cache, n1_cache, cr_cache, n2_cache, f_cache, n3_cache))
        x = y3
    logits = linear_forward(net.class_head, x)
    b1 = linear_forward(net.box_head[0], x)
    a1 = relu(b1)
    b2 = linear_forward(net.box_head[1], a1)
    a2 = relu(b2)
    braw = linear_forward(net.box_head[2], a2)
    # centers are deltas on the reference-point logits (base-detector
    # convention): the head learns local corrections, not absolute positions
    braw = braw.copy()
    braw[:, :2] += ref_logits
    # the clip keeps the open-interval contract when the sigmoid saturates in
    # float arithmetic; its band is below gradient-check resolution
    boxes = np.clip(sigmoid(braw), 1e-7, 1.0 - 1e-7)
    if counters is not None:
        counters.decoder += 1
    det = Detection(class_logits=logits, boxes=boxes)
    cache = (x0, refs, layer_caches, x, (b1, a1, b2, a2, boxes))
    return det, cache


@dataclass
class DecoderGrads:
    layers: list
    query_embed: np.ndarray
    ref_head: LinearLayer
    class_head: LinearLayer
    box_head: list


def decoder_backward(cfg: NetConfig, net: "NetParams", cache,
                     d_logits: np.ndarray, d_boxes: np.ndarray):
    """Returns (d_enc_pyramids, DecoderGrads)."""
    x0, refs, layer_caches, x_final, head_cache = cache
    b1, a1, b2, a2, boxes = head_cache
    d_x, g_class = linear_backward(net.class_head, x_final, d_logits)
    d_braw = sigmoid_backward(boxes, d_boxes)
    d_a2, g_b3 = linear_backward(net.box_head[2], a2, d_braw)
    d_b2 = relu_backward(b2, d_a2)
    d_a1, g_b2 = linear_backward(net.box_head[1], a1, d_b2)
    d_b1 = relu_backward(b1, d_a1)
    d_x_box, g_b1 = linear_backward(net.box_head[0], x_final, d_b1)
    d_x = d_x + d_x_box

    d_ref_logits_box = d_braw[:, :2].copy()  # centers reuse the ref logits

    d_enc = None
    d_refs = np.zeros_like(refs)
    layer_grads = [None] * len(net.decoder)
    for i in range(len(net.decoder) - 1, -1, -1):
        layer = net.decoder[i]
        sa_cache, n1_cache, cr_cache, n2_cache, f_cache, n3_cache = layer_caches[i]
        d_z3, g_gain3, g_shift3 = layer_norm_backward(n3_cache, layer.norm3.gain, d_x)
        d_ffn_in, g_ffn = ffn_backward(layer.ffn, f_cache, d_z3)
        d_y2 = d_z3 + d_ffn_in
        d_z2, g_gain2, g_shift2 = layer_norm_backward(n2_cache, layer.norm2.gain, d_y2)
        sg = stda_backward(cr_cache, d_z2)
        d_y1 = d_z2 + sg.query_features
        d_refs += sg.ref_points
        if d_enc is None:
            d_enc = sg.features
        else:
            for t in range(cfg.frames):
                for l in range(cfg.levels):
                    d_enc[t][l] += sg.features[t][l]
        d_z1, g_gain1, g_shift1 = layer_norm_backward(n1_cache, layer.norm1.gain, d_y1)
        d_sa_in, g_sa = self_attention_backward(layer.self_attn, sa_cache, d_z1)
        d_x = d_z1 + d_sa_in
        layer_grads[i] = DecoderLayerParams(
            self_attn=g_sa, norm1=NormParams(g_gain1, g_shift1), stda=sg.params,
            norm2=NormParams(g_gain2, g_shift2), ffn=g_ffn,
            norm3=NormParams(g_gain3, g_shift3))
    d_ref_logits = sigmoid_backward(refs, d_refs) + d_ref_logits_box
    d_x0_ref, g_ref = linear_backward(net.ref_head, x0, d_ref_logits)
    d_query_embed = d_x + d_x0_ref
    # d_enc stays None for an empty cascade: the heads never touch encoder features
    grads = DecoderGrads(layers=layer_grads, query_embed=d_query_embed,
                         ref_head=g_ref, class_head=g_class,
                         box_head=[g_b1, g_b2, g_b3])
    return d_enc, grads


# ---------------------------------------------------------------------------
# full network

@dataclass
class NetParams:
    stem: StemParams
    level_embed: np.ndarray   # [L, C]
    encoder: list
    decoder: list
    query_embed: np.ndarray   # [N, C]
    ref_head: LinearLayer     # C -> 2
    class_head: LinearLayer   # C -> num_classes + 1
    box_head: list            # 3-layer MLP C -> C -> C -> 4


def init_net(cfg: NetConfig, rng: np.random.Generator, dtype=np.float32) -> NetParams:
    cfg.validate()
    c = cfg.channels
    return NetParams(
        stem=init_stem(rng, cfg.levels, c, dtype),
        level_embed=(0.02 * rng.standard_normal((cfg.levels, c))).astype(dtype),
        encoder=[init_encoder_layer(rng, cfg, dtype) for _ in range(cfg.enc_layers)],
        decoder=[init_decoder_layer(rng, cfg, dtype) for _ in range(cfg.dec_layers)],
        # unit-scale query embeddings spread the sigmoid reference points over
        # the whole image, letting queries specialize by location
        query_embed=rng.standard_normal((cfg.num_queries, c)).astype(dtype),
        ref_head=xavier_linear(rng, c, 2, dtype),
        class_head=xavier_linear(rng, c, cfg.num_classes + 1, dtype),
        box_head=[xavier_linear(rng, c, c, dtype), xavier_linear(rng, c, c, dtype),
                  xavier_linear(rng, c, 4, dtype)],
    )


def net_forward(cfg: NetConfig, net: NetParams, frames,
                counters: PassCounters | None = None):
    """Full pass over one clip: stem per frame, encoder, decoder, heads."""
    require(len(frames) == cfg.frames,
            f"net_forward: expected {cfg.frames} frames, got {len(frames)}")
    pyramids = []
    stem_caches = []
    for frame in frames:
        maps, scache = stem_forward(net.stem, frame)
        pyramids.append(maps)
        stem_caches.append(scache)
    if counters is not None:
        counters.stem += 1
    enc_out, enc_cache = encoder_forward(cfg, net, pyramids, counters)
    det, dec_cache = decoder_forward(cfg, net, enc_out, counters=counters)
    return det, (stem_caches, enc_cache, dec_cache)


def net_backward(cfg: NetConfig, net: NetParams, cache,
                 d_logits: np.ndarray, d_boxes: np.ndarray) -> NetParams:
    """Backward through the whole net; returns a NetParams-shaped gradient tree."""
    stem_caches, enc_cache, dec_cache = cache
    d_enc, dec_grads = decoder_backward(cfg, net, dec_cache, d_logits, d_boxes)
    grads = tree_zeros_like(net)
    grads.query_embed += dec_grads.query_embed
    tree_add_(grads.ref_head, dec_grads.ref_head)
    tree_add_(grads.class_head, dec_grads.class_head)
    tree_add_(grads.box_head, dec_grads.box_head)
    tree_add_(grads.decoder, dec_grads.layers)
    if d_enc is None:
        return grads
    d_pyramids, enc_layer_grads, g_level = encoder_backward(cfg, net, enc_cache, d_enc)
    tree_add_(grads.encoder, enc_layer_grads)
    grads.level_embed += g_level
    for scache, d_maps in zip(stem_caches, d_pyramids):
        _, g_stem = stem_backward(net.stem, scache, d_maps)
        tree_add_(grads.stem, g_stem)
    return grads


# ---------------------------------------------------------------------------
# checkpoint format: magic "STN1" | u32 LE tensor count | per tensor:
# u32 name length, UTF-8 name, u32 rank, rank x u32 dims, row-major f32 LE

CHECKPOINT_MAGIC = b"STN1"


class CheckpointError(InputError):
    """A checkpoint file is malformed or does not match the network."""


def save_checkpoint(path: str, params: NetParams) -> None:
    entries = list(tree_arrays(params))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated checkpoint while reading {what}")
    return data


def read_checkpoint_tensors(path: str) -> dict[str, np.ndarray]:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, path, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, path, f"name length #{i}"))
            name = _read_exact(f, nlen, path, f"name #{i}").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, path, f"dims of {name}")) if rank else ()
            n_elems = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * n_elems, path, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors


def load_checkpoint(path: str, params: NetParams) -> None:
    """Load tensors into an existing parameter tree, in place."""
    tensors = read_checkpoint_tensors(path)
    seen = set()
    for name, arr in tree_arrays(params):
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        loaded = tensors[name]
        if loaded.shape != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {loaded.shape}, net expects {arr.shape}")
        arr[...] = loaded.astype(arr.dtype)
        seen.add(name)
    extra = set(tensors) - seen
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)[:4]}")
