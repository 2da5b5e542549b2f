"""Set-prediction machinery: assignment, GIoU, the matched loss, and AP.

Boxes are normalized (cx, cy, w, h) everywhere. The assignment core is
scipy's linear_sum_assignment wrapped with a lexicographic tie-break pass so
results are reproducible bit-for-bit; the matched loss follows the usual
detection-transformer recipe (cross-entropy + L1 + GIoU, unmatched queries
trained against "no object" at weight 0.1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import InputError, log_softmax, require, softmax
from .transformer import Detection

NO_OBJECT_WEIGHT = 0.1
DEFAULT_LOSS_WEIGHTS = (2.0, 5.0, 2.0)  # (cls, l1, giou)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class GroundTruth:
    boxes: np.ndarray   # [G, 4] normalized cxcywh
    labels: np.ndarray  # [G] class ids

    def validate(self) -> None:
        require(self.boxes.ndim == 2 and self.boxes.shape[1] == 4,
                "GroundTruth: boxes must be [G, 4]")
        require(self.labels.shape == (self.boxes.shape[0],),
                "GroundTruth: labels must match boxes")
        if len(self.boxes):
            w = self.boxes[:, 2]
            h = self.boxes[:, 3]
            require(bool(np.all((w > 0) & (h > 0) & (w <= 1) & (h <= 1))),
                    "GroundTruth: box sizes must be in (0, 1]")
            x1 = self.boxes[:, 0] - w / 2
            y1 = self.boxes[:, 1] - h / 2
            require(bool(np.all((x1 >= -1e-6) & (y1 >= -1e-6)
                                & (x1 + w <= 1 + 1e-6) & (y1 + h <= 1 + 1e-6))),
                    "GroundTruth: boxes must lie inside the unit square")


@dataclass
class Matching:
    pairs: list        # (query index, gt index), sorted by query index
    total_cost: float


def _assignment_cost(cost: np.ndarray) -> float:
    if min(cost.shape) == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost) -> Matching:
    """Minimum-total-cost one-to-one assignment of rows (queries) to columns.

    Among all optimal assignments, returns the one whose sorted pair list is
    lexicographically smallest.
    """
    cost = np.asarray(cost, dtype=np.float64)
    require(cost.ndim == 2, "hungarian_match: cost must be a 2-D matrix")
    if not np.isfinite(cost).all():
        raise InputError("hungarian_match: non-finite cost entry")
    n, g = cost.shape
    size = min(n, g)
    if size == 0:
        return Matching([], 0.0)
    best = _assignment_cost(cost)
    tol = 1e-9 * max(1.0, abs(best))
    rows = list(range(n))
    cols = list(range(g))
    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    while len(pairs) < size:
        need = size - len(pairs) - 1
        chosen = None
        for qi, q in enumerate(rows):
            rest_rows = rows[qi + 1:]
            if len(rest_rows) < need:
                break
            for c in cols:
                rest_cols = [x for x in cols if x != c]
                rem = _assignment_cost(cost[np.ix_(rest_rows, rest_cols)]) if need else 0.0
                if fixed + cost[q, c] + rem <= best + tol:
                    chosen = (qi, q, c)
                    break
            if chosen:
                break
        assert chosen is not None, "optimal assignment must admit a prefix"
        qi, q, c = chosen
        pairs.append((q, c))
        fixed += cost[q, c]
        rows = rows[qi + 1:]
        cols.remove(c)
    total = float(sum(cost[q, c] for q, c in pairs))
    return Matching(pairs, total)


# ---------------------------------------------------------------------------
# box geometry

def _corners(b):
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between cxcywh box sets [P, 4] and [Q, 4]."""
    ax1, ay1, ax2, ay2 = (c[:, None] for c in _corners(a))
    bx1, by1, bx2, by2 = _corners(b)
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = ((ax2 - ax1) * (ay2 - ay1)) + ((bx2 - bx1) * (by2 - by1)) - inter
    return inter / np.maximum(union, 1e-12)


def giou_batch(a: np.ndarray, b: np.ndarray):
    """Elementwise generalized IoU of paired cxcywh boxes; returns (values, cache)."""
    require(a.shape == b.shape and a.shape[-1] == 4, "giou: boxes must be paired [*, 4]")
    if not (np.all(a[..., 2:] > 0) and np.all(b[..., 2:] > 0)):
        raise InputError("giou: degenerate box (w, h must be > 0)")
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    ix1 = np.maximum(ax1, bx1)
    iy1 = np.maximum(ay1, by1)
    ix2 = np.minimum(ax2, bx2)
    iy2 = np.minimum(ay2, by2)
    iw = np.clip(ix2 - ix1, 0, None)
    ih = np.clip(iy2 - iy1, 0, None)
    inter = iw * ih
    area_a = a[..., 2] * a[..., 3]
    area_b = b[..., 2] * b[..., 3]
    union = area_a + area_b - inter
    ex1 = np.minimum(ax1, bx1)
    ey1 = np.minimum(ay1, by1)
    ex2 = np.maximum(ax2, bx2)
    ey2 = np.maximum(ay2, by2)
    ew = ex2 - ex1
    eh = ey2 - ey1
    enc = ew * eh
    vals = inter / union - (enc - union) / enc
    cache = (a, b, (ax1, ay1, ax2, ay2), (bx1, by1, bx2, by2),
             iw, ih, inter, union, ew, eh, enc)
    return vals, cache


def giou_batch_backward(cache, d_vals):
    """VJP of giou_batch; returns (d_a, d_b) in cxcywh coordinates."""
    a, b, (ax1, ay1, ax2, ay2), (bx1, by1, bx2, by2), iw, ih, inter, union, ew, eh, enc = cache
    # g(I, Aa, Ab, E) = I/U - (E - U)/E with U = Aa + Ab - I
    dg_dU = -inter / union ** 2 + 1.0 / enc
    dg_dI = 1.0 / union - dg_dU          # direct term + U's dependence on I
    dg_dE = -union / enc ** 2
    dg_dAa = dg_dU
    dg_dAb = dg_dU

    live = (iw > 0) & (ih > 0)
    # intersection corner derivatives (max/min pick a branch; ties go to a)
    dI_dax1 = np.where(live & (ax1 > bx1), -ih, 0.0)
    dI_dax2 = np.where(live & (ax2 < bx2), ih, 0.0)
    dI_day1 = np.where(live & (ay1 > by1), -iw, 0.0)
    dI_day2 = np.where(live & (ay2 < by2), iw, 0.0)
    dI_dbx1 = np.where(live & (bx1 >= ax1), -ih, 0.0)
    dI_dbx2 = np.where(live & (bx2 <= ax2), ih, 0.0)
    dI_dby1 = np.where(live & (by1 >= ay1), -iw, 0.0)
    dI_dby2 = np.where(live & (by2 <= ay2), iw, 0.0)
    # enclosing-box corner derivatives
    dE_dax1 = np.where(ax1 < bx1, -eh, 0.0)
    dE_dax2 = np.where(ax2 > bx2, eh, 0.0)
    dE_day1 = np.where(ay1 < by1, -ew, 0.0)
    dE_day2 = np.where(ay2 > by2, ew, 0.0)
    dE_dbx1 = np.where(bx1 <= ax1, -eh, 0.0)
    dE_dbx2 = np.where(bx2 >= ax2, eh, 0.0)
    dE_dby1 = np.where(by1 <= ay1, -ew, 0.0)
    dE_dby2 = np.where(by2 >= ay2, ew, 0.0)

    g_ax1 = dg_dI * dI_dax1 + dg_dE * dE_dax1
    g_ax2 = dg_dI * dI_dax2 + dg_dE * dE_dax2
    g_ay1 = dg_dI * dI_day1 + dg_dE * dE_day1
    g_ay2 = dg_dI * dI_day2 + dg_dE * dE_day2
    g_bx1 = dg_dI * dI_dbx1 + dg_dE * dE_dbx1
    g_bx2 = dg_dI * dI_dbx2 + dg_dE * dE_dbx2
    g_by1 = dg_dI * dI_dby1 + dg_dE * dE_dby1
    g_by2 = dg_dI * dI_dby2 + dg_dE * dE_dby2

    d_a = np.empty_like(a)
    d_b = np.empty_like(b)
    # corners -> cxcywh: x1 = cx - w/2, x2 = cx + w/2
    d_a[..., 0] = d_vals * (g_ax1 + g_ax2)
    d_a[..., 1] = d_vals * (g_ay1 + g_ay2)
    d_a[..., 2] = d_vals * (dg_dAa * a[..., 3] + 0.5 * (g_ax2 - g_ax1))
    d_a[..., 3] = d_vals * (dg_dAa * a[..., 2] + 0.5 * (g_ay2 - g_ay1))
    d_b[..., 0] = d_vals * (g_bx1 + g_bx2)
    d_b[..., 1] = d_vals * (g_by1 + g_by2)
    d_b[..., 2] = d_vals * (dg_dAb * b[..., 3] + 0.5 * (g_bx2 - g_bx1))
    d_b[..., 3] = d_vals * (dg_dAb * b[..., 2] + 0.5 * (g_by2 - g_by1))
    return d_a, d_b


def giou(a, b) -> float:
    """Generalized IoU of two cxcywh boxes, in (-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vals, _ = giou_batch(a[None], b[None])
    return float(vals[0])


# ---------------------------------------------------------------------------
# matched set loss

@dataclass
class SetLossCache:
    probs: np.ndarray
    matching: Matching
    gt: GroundTruth
    matched_q: np.ndarray
    matched_g: np.ndarray
    giou_cache: object | None
    weights: tuple
    boxes: np.ndarray


def set_loss(pred: Detection, gt: GroundTruth,
             weights=DEFAULT_LOSS_WEIGHTS) -> tuple[float, SetLossCache]:
    """Hungarian-matched detection loss (scalar sum over queries).

    Matched queries pay cross-entropy plus weighted L1 and (1 - GIoU) box
    terms; unmatched queries pay cross-entropy against "no object" scaled by
    0.1. The matching cost uses probabilities, not log-probs, so it stays
    bounded.
    """
    gt.validate()
    lam_cls, lam_l1, lam_giou = weights
    logits = pred.class_logits
    boxes = pred.boxes
    n = logits.shape[0]
    no_obj = logits.shape[1] - 1
    logp = log_softmax(logits.astype(np.float64))
    probs = np.exp(logp)
    g = len(gt.labels)

    if g > 0:
        prob_cost = 1.0 - probs[:, gt.labels]                       # [N, G]
        l1_cost = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=2)
        pair_a = np.repeat(boxes.astype(np.float64), g, axis=0)
        pair_b = np.tile(gt.boxes.astype(np.float64), (n, 1))
        giou_vals, _ = giou_batch(pair_a, pair_b)
        cost = (lam_cls * prob_cost + lam_l1 * l1_cost
                + lam_giou * (1.0 - giou_vals.reshape(n, g)))
        matching = hungarian_match(cost)
    else:
        matching = Matching([], 0.0)

    matched_q = np.array([q for q, _ in matching.pairs], dtype=np.int64)
    matched_g = np.array([gi for _, gi in matching.pairs], dtype=np.int64)
    unmatched = np.setdiff1d(np.arange(n), matched_q, assume_unique=False)

    loss = 0.0
    giou_cache = None
    if len(matched_q):
        loss += float(-logp[matched_q, gt.labels[matched_g]].sum())
        mb = boxes[matched_q].astype(np.float64)
        gb = gt.boxes[matched_g].astype(np.float64)
        loss += lam_l1 * float(np.abs(mb - gb).sum())
        gvals, giou_cache = giou_batch(mb, gb)
        loss += lam_giou * float((1.0 - gvals).sum())
    loss += NO_OBJECT_WEIGHT * float(-logp[unmatched, no_obj].sum())

    cache = SetLossCache(probs=probs, matching=matching, gt=gt,
                         matched_q=matched_q, matched_g=matched_g,
                         giou_cache=giou_cache, weights=weights, boxes=boxes)
    return loss, cache


def set_loss_backward(cache: SetLossCache):
    """Returns (d_logits, d_boxes); the matching is treated as a constant."""
    lam_cls, lam_l1, lam_giou = cache.weights
    probs = cache.probs
    n, ncols = probs.shape
    no_obj = ncols - 1
    d_logits = NO_OBJECT_WEIGHT * probs.copy()
    d_logits[:, no_obj] -= NO_OBJECT_WEIGHT
    if len(cache.matched_q):
        q = cache.matched_q
        labels = cache.gt.labels[cache.matched_g]
        d_logits[q] = probs[q]
        d_logits[q, labels] -= 1.0
    d_boxes = np.zeros(cache.boxes.shape, dtype=np.float64)
    if len(cache.matched_q):
        mb = cache.boxes[cache.matched_q].astype(np.float64)
        gb = cache.gt.boxes[cache.matched_g].astype(np.float64)
        d_box = lam_l1 * np.sign(mb - gb)
        d_giou_a, _ = giou_batch_backward(cache.giou_cache,
                                          -lam_giou * np.ones(len(mb)))
        d_boxes[cache.matched_q] = d_box + d_giou_a
    return d_logits, d_boxes


# ---------------------------------------------------------------------------
# COCO-style average precision

def scored_detections(det: Detection):
    """One scored detection per query: argmax over real classes, no-object excluded."""
    probs = softmax(det.class_logits)[:, :-1]
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(labels)), labels]
    return scores, labels, det.boxes


def _class_ap(dets, n_gt, gt_by_frame, thr) -> float:
    """dets: list of (score, frame, idx, box) already sorted; greedy matching."""
    if n_gt == 0:
        return 0.0
    if not dets:
        return 0.0
    taken = {f: np.zeros(len(b), dtype=bool) for f, b in gt_by_frame.items()}
    tp = np.zeros(len(dets))
    for i, (score, frame, idx, box) in enumerate(dets):
        gts = gt_by_frame.get(frame)
        if gts is None or len(gts) == 0:
            continue
        ious = box_iou_matrix(np.asarray(box, dtype=np.float64)[None], gts)[0]
        ious = np.where(taken[frame], -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] >= thr:
            taken[frame][best] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope from the right, then 101-point sampling
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idxs = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idxs < len(precision), precision[np.minimum(idxs, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_ap(preds, gts) -> tuple[float, float, float]:
    """COCO-style (AP, AP50, AP75) over per-frame predictions.

    preds: per frame, (scores [P], labels [P], boxes [P, 4]); gts: per frame
    GroundTruth. AP averages the 10 IoU thresholds 0.50:0.05:0.95 with
    101-point interpolated precision, over every class that appears in the
    ground truth. Detections sort by score, then frame, then box index.
    """
    require(len(preds) == len(gts), "evaluate_ap: preds and gts must align per frame")
    classes = sorted({int(c) for gt in gts for c in gt.labels})
    if not classes:
        return 0.0, 0.0, 0.0
    per_thr = {}
    for cls in classes:
        dets = []
        gt_by_frame = {}
        n_gt = 0
        for f, (pred, gt) in enumerate(zip(preds, gts)):
            scores, labels, boxes = pred
            for i in range(len(scores)):
                if int(labels[i]) == cls:
                    dets.append((float(scores[i]), f, i, boxes[i]))
            mask = gt.labels == cls
            if mask.any():
                gt_by_frame[f] = gt.boxes[mask].astype(np.float64)
                n_gt += int(mask.sum())
        dets.sort(key=lambda d: (-d[0], d[1], d[2]))
        for thr in IOU_THRESHOLDS:
            per_thr.setdefault(thr, []).append(_class_ap(dets, n_gt, gt_by_frame, thr))
    ap_by_thr = {thr: float(np.mean(v)) for thr, v in per_thr.items()}
    ap = float(np.mean(list(ap_by_thr.values())))
    return ap, ap_by_thr[0.5], ap_by_thr[0.75]
