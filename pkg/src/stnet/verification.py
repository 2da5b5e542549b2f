"""Verification suites: finite-difference gradient checks and brute-force oracles.

Everything here runs in float64. The oracles are deliberately naive
transcriptions (nested loops, explicit exp/sum normalization, permutation
enumeration) kept independent of the vectorized implementations they check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import NetConfig
from .detection import (GroundTruth, Matching, hungarian_match, set_loss,
                        set_loss_backward)
from .numerics import (LinearLayer, grad_check, layer_norm_backward,
                       layer_norm_fwd, linear_backward, linear_forward,
                       make_rng, softmax, softmax_backward, tree_arrays)
from .stda import QueryBatch, StdaParams, init_stda, stda_backward, stda_forward
from .synthdata import generate_video, sample_clip
from .transformer import (Detection, init_net, init_self_attention, init_stem,
                          net_backward, net_forward, self_attention,
                          self_attention_backward, stem_backward, stem_forward)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


# ---------------------------------------------------------------------------
# naive oracles

def oracle_linear(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """Triple-loop affine map."""
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros((flat.shape[0], layer.out_dim), dtype=np.float64)
    for r in range(flat.shape[0]):
        for o in range(layer.out_dim):
            acc = float(layer.bias[o])
            for i in range(layer.in_dim):
                acc += float(layer.weight[o, i]) * float(flat[r, i])
            out[r, o] = acc
    return out.reshape(x.shape[:-1] + (layer.out_dim,))


def oracle_softmax(x: np.ndarray) -> np.ndarray:
    """Direct exp / sum(exp) over the last axis, row by row."""
    flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
    out = np.empty_like(flat)
    for r in range(flat.shape[0]):
        shifted = flat[r] - flat[r].max()
        e = np.array([math.exp(v) for v in shifted])
        out[r] = e / e.sum()
    return out.reshape(x.shape)


def oracle_self_attention(params, x: np.ndarray) -> np.ndarray:
    """Per-head scaled dot-product attention, written with explicit loops."""
    n, c = x.shape
    m = params.heads
    dh = c // m
    q = oracle_linear(params.q_proj, x)
    k = oracle_linear(params.k_proj, x)
    v = oracle_linear(params.v_proj, x)
    cat = np.zeros((n, c), dtype=np.float64)
    for h in range(m):
        qs = q[:, h * dh:(h + 1) * dh]
        ks = k[:, h * dh:(h + 1) * dh]
        vs = v[:, h * dh:(h + 1) * dh]
        for i in range(n):
            scores = np.array([float(qs[i] @ ks[j]) / math.sqrt(dh) for j in range(n)])
            attn = oracle_softmax(scores[None])[0]
            cat[i, h * dh:(h + 1) * dh] = sum(attn[j] * vs[j] for j in range(n))
    return oracle_linear(params.out_proj, cat)


def _oracle_bilinear_head(fmap, value_proj, head, head_dim, x, y):
    """Sample the value-projected map's head slice at (x, y), zero padding."""
    _, h, w = fmap.shape
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0
    out = np.zeros(head_dim, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yi, xi = y0 + dy, x0 + dx
            if 0 <= yi < h and 0 <= xi < w:
                wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
                proj = value_proj.weight @ fmap[:, yi, xi] + value_proj.bias
                out += wgt * proj[head * head_dim:(head + 1) * head_dim]
    return out


def oracle_stda(params: StdaParams, queries: QueryBatch, feats) -> np.ndarray:
    """Literal five-nested-loop transcription of the attention formula:
    per head, sum over frames, levels and points of weight times the sampled
    value, then the per-head output maps summed (realized as output_proj)."""
    m_heads, k_pts = params.heads, params.points
    t_frames, levels, c = params.frames, params.levels, params.channels
    d = c // m_heads
    n = queries.features.shape[0]
    out = np.zeros((n, c), dtype=np.float64)
    for q in range(n):
        zq = queries.features[q].astype(np.float64)
        logits = params.weight_net.weight @ zq + params.weight_net.bias
        offs = params.offset_net.weight @ zq + params.offset_net.bias
        for m in range(m_heads):
            block = np.array([
                logits[((m * t_frames + t) * levels + l) * k_pts + k]
                for t in range(t_frames) for l in range(levels) for k in range(k_pts)])
            e = np.exp(block - block.max())
            denom = e.sum()
            acc = np.zeros(d, dtype=np.float64)
            pos = 0
            for t in range(t_frames):
                for l in range(levels):
                    _, hl, wl = feats[t][l].shape
                    for k in range(k_pts):
                        idx = ((m * t_frames + t) * levels + l) * k_pts + k
                        a = e[pos] / denom
                        pos += 1
                        px = queries.ref_points[q, 0] * wl - 0.5 + offs[2 * idx]
                        py = queries.ref_points[q, 1] * hl - 0.5 + offs[2 * idx + 1]
                        acc += a * _oracle_bilinear_head(feats[t][l], params.value_proj,
                                                         m, d, px, py)
            out[q] += params.output_proj.weight[:, m * d:(m + 1) * d] @ acc
        out[q] += params.output_proj.bias
    return out


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Minimum assignment cost by enumerating every injective mapping."""
    n, g = cost.shape
    if min(n, g) == 0:
        return 0.0
    best = math.inf
    if n <= g:
        for perm in itertools.permutations(range(g), n):
            best = min(best, sum(cost[i, p] for i, p in enumerate(perm)))
    else:
        for perm in itertools.permutations(range(n), g):
            best = min(best, sum(cost[p, j] for j, p in enumerate(perm)))
    return float(best)


# ---------------------------------------------------------------------------
# toy instances

TOY_STDA_DIMS = ((5, 7), (3, 4))


def toy_stda_instance(rng, n_queries=3, heads=2, points=2, frames=2, levels=2,
                      channels=4, dims=TOY_STDA_DIMS, randomize=True):
    params = init_stda(rng, channels, heads, points, frames, levels, np.float64)
    if randomize:
        # nonzero offset/weight nets so every gradient path is exercised
        for layer in (params.offset_net, params.weight_net):
            layer.weight[...] = 0.3 * rng.standard_normal(layer.weight.shape)
            layer.bias[...] += 0.3 * rng.standard_normal(layer.bias.shape)
    feats = [[rng.standard_normal((channels, h, w)) for h, w in dims]
             for _ in range(frames)]
    queries = QueryBatch(rng.standard_normal((n_queries, channels)),
                         rng.uniform(0.1, 0.9, size=(n_queries, 2)))
    return params, queries, feats


def toy_net_config() -> NetConfig:
    return NetConfig(frames=2, levels=2, channels=4, heads=2, points=2,
                     enc_layers=1, dec_layers=1, num_queries=3, ffn_dim=8,
                     num_classes=2)


# ---------------------------------------------------------------------------
# oracle suite

def run_oracle_suite(seed: int = 0, eq1_instances: int = 100,
                     hungarian_trials: int = 1000) -> list[CheckResult]:
    rng = make_rng(seed, 0x0AC1)
    results = []

    worst = 0.0
    for _ in range(eq1_instances):
        params, queries, feats = toy_stda_instance(rng)
        got, _ = stda_forward(params, queries, feats)
        want = oracle_stda(params, queries, feats)
        worst = max(worst, float(np.abs(got - want).max()))
    results.append(CheckResult("stda vs nested-loop oracle", worst, 1e-10))

    worst = 0.0
    for _ in range(hungarian_trials):
        n = int(rng.integers(1, 7))
        g = int(rng.integers(1, 7))
        cost = rng.uniform(0, 10, size=(n, g))
        match = hungarian_match(cost)
        want = brute_force_assignment_cost(cost)
        worst = max(worst, abs(match.total_cost - want))
    results.append(CheckResult("hungarian vs enumeration", worst, 1e-9))

    worst = 0.0
    for _ in range(20):
        layer = LinearLayer(rng.standard_normal((4, 3)), rng.standard_normal(4))
        x = rng.standard_normal((5, 3))
        worst = max(worst, float(np.abs(linear_forward(layer, x) - oracle_linear(layer, x)).max()))
    results.append(CheckResult("linear vs triple-loop oracle", worst, 1e-12))

    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((6, 7))
        worst = max(worst, float(np.abs(softmax(x) - oracle_softmax(x)).max()))
    results.append(CheckResult("softmax vs exp/sum oracle", worst, 1e-12))

    worst = 0.0
    for _ in range(5):
        params = init_self_attention(rng, 8, 2, np.float64)
        x = rng.standard_normal((5, 8))
        got, _ = self_attention(params, x)
        worst = max(worst, float(np.abs(got - oracle_self_attention(params, x)).max()))
    results.append(CheckResult("self-attention vs direct-formula oracle", worst, 1e-10))

    return results


# ---------------------------------------------------------------------------
# gradient suite

def _gradcheck_named(results, label, compute, params_tree, h=1e-5, tol=1e-4):
    """Gradcheck every array in params_tree against compute() -> (loss, grads_tree)."""
    for name, arr in tree_arrays(params_tree):
        def f(_theta, _name=name):
            loss, grads = compute()
            return loss, dict(tree_arrays(grads))[_name]
        results.append(CheckResult(f"{label}.{name}", grad_check(f, arr, h), tol))


def run_gradient_suite(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed, 0x6AD5)
    results: list[CheckResult] = []
    tol = 1e-4

    # primitive ops -------------------------------------------------------
    layer = LinearLayer(rng.standard_normal((4, 3)), rng.standard_normal(4))
    x_lin = rng.standard_normal((5, 3))
    r_lin = rng.standard_normal((5, 4))

    def f_linear(theta):
        y = linear_forward(layer, x_lin)
        _, g = linear_backward(layer, x_lin, r_lin)
        return float((y * r_lin).sum()), g.weight
    results.append(CheckResult("linear.weight", grad_check(f_linear, layer.weight), tol))

    x_sm = rng.standard_normal(7)
    r_sm = rng.standard_normal(7)

    def f_softmax(theta):
        y = softmax(theta)
        return float((y * r_sm).sum()), softmax_backward(y, r_sm)
    results.append(CheckResult("softmax.input", grad_check(f_softmax, x_sm), tol))

    gain = rng.standard_normal(5)
    shift = rng.standard_normal(5)
    x_ln = rng.standard_normal((4, 5))
    r_ln = rng.standard_normal((4, 5))

    def f_layernorm(theta):
        y, cache = layer_norm_fwd(theta, gain, shift)
        d_x, _, _ = layer_norm_backward(cache, gain, r_ln)
        return float((y * r_ln).sum()), d_x
    results.append(CheckResult("layer_norm.input", grad_check(f_layernorm, x_ln), tol))

    # bilinear sampling kernel ---------------------------------------------
    t_f, m_h, d_h, hh, ww, n_q, k_p = 2, 2, 3, 5, 6, 4, 3
    value = rng.standard_normal((t_f, m_h, d_h, hh, ww))
    locs = np.ascontiguousarray(
        rng.uniform(-1.5, max(hh, ww) + 0.5, size=(n_q, m_h, t_f, k_p, 2)))
    wgts = rng.uniform(0.1, 1.0, size=(n_q, m_h, t_f, k_p))
    r_out = rng.standard_normal((n_q, m_h, d_h))

    def sample_loss():
        out = np.zeros((n_q, m_h, d_h))
        kernels.sample_fwd(value, locs, wgts, out)
        d_value = np.zeros_like(value)
        d_locs = np.zeros_like(locs)
        d_wgts = np.zeros_like(wgts)
        kernels.sample_bwd(value, locs, wgts, r_out, d_value, d_locs, d_wgts)
        return float((out * r_out).sum()), (d_value, d_locs, d_wgts)

    for label, theta, pick in (("bilinear.features", value, 0),
                               ("bilinear.locations", locs, 1),
                               ("bilinear.weights", wgts, 2)):
        def f(_theta, _pick=pick):
            loss, grads = sample_loss()
            return loss, grads[_pick]
        results.append(CheckResult(label, grad_check(f, theta), tol))

    # STDA ------------------------------------------------------------------
    params, queries, feats = toy_stda_instance(rng)
    r_stda = rng.standard_normal((queries.features.shape[0], params.channels))

    def stda_loss():
        out, cache = stda_forward(params, queries, feats)
        return float((out * r_stda).sum()), stda_backward(cache, r_stda)

    def compute_params():
        loss, g = stda_loss()
        return loss, g.params
    _gradcheck_named(results, "stda", compute_params, params)

    def f_qfeat(theta):
        loss, g = stda_loss()
        return loss, g.query_features
    results.append(CheckResult("stda.query_features",
                               grad_check(f_qfeat, queries.features), tol))

    def f_ref(theta):
        loss, g = stda_loss()
        return loss, g.ref_points
    results.append(CheckResult("stda.ref_points",
                               grad_check(f_ref, queries.ref_points), tol))

    def f_feat(theta):
        loss, g = stda_loss()
        return loss, g.features[0][0]
    results.append(CheckResult("stda.input_features",
                               grad_check(f_feat, feats[0][0]), tol))

    # self-attention ----------------------------------------------------------
    sa = init_self_attention(rng, 6, 2, np.float64)
    x_sa = rng.standard_normal((4, 6))
    r_sa = rng.standard_normal((4, 6))

    def sa_loss():
        y, cache = self_attention(sa, x_sa)
        d_x, g = self_attention_backward(sa, cache, r_sa)
        return float((y * r_sa).sum()), (d_x, g)

    def compute_sa():
        loss, (d_x, g) = sa_loss()
        return loss, g
    _gradcheck_named(results, "self_attention", compute_sa, sa)

    def f_sa_in(theta):
        loss, (d_x, g) = sa_loss()
        return loss, d_x
    results.append(CheckResult("self_attention.input", grad_check(f_sa_in, x_sa), tol))

    # conv stem ---------------------------------------------------------------
    stem = init_stem(rng, levels=2, channels=4, dtype=np.float64)
    frame = rng.standard_normal((1, 16, 16))
    r_maps = None

    def stem_loss():
        maps, cache = stem_forward(stem, frame)
        nonlocal r_maps
        if r_maps is None:
            r_maps = [rng.standard_normal(m.shape) for m in maps]
        loss = sum(float((m * r).sum()) for m, r in zip(maps, r_maps))
        d_frame, g = stem_backward(stem, cache, r_maps)
        return loss, (d_frame, g)

    def compute_stem():
        loss, (d_frame, g) = stem_loss()
        return loss, g
    _gradcheck_named(results, "stem", compute_stem, stem)

    def f_stem_in(theta):
        loss, (d_frame, g) = stem_loss()
        return loss, d_frame
    results.append(CheckResult("stem.input", grad_check(f_stem_in, frame), tol))

    # set loss ------------------------------------------------------------------
    n_q2 = 5
    logits = rng.standard_normal((n_q2, 3))
    boxes = rng.uniform(0.25, 0.75, size=(n_q2, 4))
    boxes[:, 2:] = rng.uniform(0.1, 0.2, size=(n_q2, 2))
    gt = GroundTruth(np.array([[0.4, 0.4, 0.2, 0.25], [0.65, 0.6, 0.15, 0.2]]),
                     np.array([0, 1]))

    def loss_and_grads():
        det = Detection(class_logits=logits, boxes=boxes)
        loss, cache = set_loss(det, gt)
        d_logits, d_boxes = set_loss_backward(cache)
        return loss, (d_logits, d_boxes)

    def f_logits(theta):
        loss, (d_l, d_b) = loss_and_grads()
        return loss, d_l
    results.append(CheckResult("set_loss.logits", grad_check(f_logits, logits), tol))

    def f_boxes(theta):
        loss, (d_l, d_b) = loss_and_grads()
        return loss, d_b
    results.append(CheckResult("set_loss.boxes", grad_check(f_boxes, boxes), tol))

    # full network end-to-end (covers encoder, decoder, heads, ref head) --------
    cfg = toy_net_config()
    net = init_net(cfg, rng, np.float64)
    # perturb away from the symmetric init: the ring-shaped offset biases put
    # sampling points exactly on integer coordinates, where the bilinear
    # interpolation has kinks and central differences are meaningless
    for _, arr in tree_arrays(net):
        arr += 0.05 * rng.standard_normal(arr.shape)
    video = generate_video(seed=(seed, 99), height=16, width=16, n_frames=8,
                           difficulty=0.0)
    clip = sample_clip(video, 2, make_rng(seed, 3))
    clip_frames = [f.astype(np.float64) for f in clip.frames[:cfg.frames]]

    def net_loss():
        det, cache = net_forward(cfg, net, clip_frames)
        loss, lcache = set_loss(det, clip.target)
        d_logits, d_boxes = set_loss_backward(lcache)
        return loss, net_backward(cfg, net, cache, d_logits, d_boxes)
    _gradcheck_named(results, "net", net_loss, net)

    return results
