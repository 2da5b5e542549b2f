import math

import numpy as np
import pytest

from stnet.detection import (GroundTruth, Matching, box_iou_matrix, evaluate_ap,
                             giou, giou_batch, giou_batch_backward,
                             hungarian_match, scored_detections, set_loss,
                             set_loss_backward)
from stnet.numerics import InputError, grad_check, make_rng
from stnet.transformer import Detection
from stnet.verification import brute_force_assignment_cost


# ---------------------------------------------------------------------------
# hungarian matching

def test_hungarian_diagonal_optimum():
    m = hungarian_match(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert m.pairs == [(0, 0), (1, 1)]
    assert m.total_cost == 0.0


def test_hungarian_single_cell():
    m = hungarian_match(np.array([[7.0]]))
    assert m.pairs == [(0, 0)]
    assert m.total_cost == 7.0


def test_hungarian_random_5x7_matches_enumeration():
    rng = make_rng(70)
    cost = rng.uniform(0, 10, size=(5, 7))
    m = hungarian_match(cost)
    assert m.total_cost == pytest.approx(brute_force_assignment_cost(cost), abs=1e-9)
    assert len(m.pairs) == 5


@pytest.mark.parametrize("seed", range(8))
def test_hungarian_property_small_matrices(seed):
    rng = make_rng(71, seed)
    for _ in range(25):
        n = int(rng.integers(0, 7))
        g = int(rng.integers(0, 7))
        cost = rng.uniform(-5, 5, size=(n, g))
        m = hungarian_match(cost)
        assert len(m.pairs) == min(n, g)
        assert m.total_cost == pytest.approx(brute_force_assignment_cost(cost), abs=1e-9)
        qs = [q for q, _ in m.pairs]
        gs = [c for _, c in m.pairs]
        assert len(set(qs)) == len(qs) and len(set(gs)) == len(gs)


def test_hungarian_lexicographic_tiebreak():
    # every assignment costs 0; the sorted-pair list must be the diagonal
    m = hungarian_match(np.zeros((3, 3)))
    assert m.pairs == [(0, 0), (1, 1), (2, 2)]
    # rows exceed columns: queries 0..1 must win over later rows on ties
    m = hungarian_match(np.zeros((4, 2)))
    assert m.pairs == [(0, 0), (1, 1)]


def test_hungarian_rejects_nonfinite():
    with pytest.raises(InputError):
        hungarian_match(np.array([[0.0, math.inf]]))


def test_hungarian_empty_sides():
    assert hungarian_match(np.zeros((0, 3))).pairs == []
    assert hungarian_match(np.zeros((3, 0))).pairs == []


# ---------------------------------------------------------------------------
# giou

def test_giou_identical_boxes():
    assert giou([0.5, 0.5, 0.2, 0.3], [0.5, 0.5, 0.2, 0.3]) == pytest.approx(1.0)


def test_giou_disjoint_touching_corners():
    # IoU 0, union 0.08, enclosing 0.64 -> -(0.64 - 0.08) / 0.64
    val = giou([0.2, 0.2, 0.2, 0.2], [0.8, 0.8, 0.2, 0.2])
    assert val == pytest.approx(-0.875)


def test_giou_nested_half_area():
    # inner box of half the area, centered: IoU 0.5, enclosing = outer box
    val = giou([0.5, 0.5, 0.4, 0.4], [0.5, 0.5, 0.4, 0.2])
    assert val == pytest.approx(0.5)


def test_giou_symmetry_and_range():
    rng = make_rng(72)
    for _ in range(200):
        a = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)])
        b = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)])
        v1, v2 = giou(a, b), giou(b, a)
        assert v1 == pytest.approx(v2, abs=1e-12)
        assert -1.0 < v1 <= 1.0


def test_giou_equals_iou_under_containment():
    a = [0.5, 0.5, 0.6, 0.6]
    b = [0.5, 0.55, 0.2, 0.1]  # fully inside a
    iou = float(box_iou_matrix(np.array([a]), np.array([b]))[0, 0])
    assert giou(a, b) == pytest.approx(iou)


def test_giou_rejects_degenerate():
    with pytest.raises(InputError):
        giou([0.5, 0.5, 0.0, 0.2], [0.5, 0.5, 0.2, 0.2])


def test_giou_gradients_match_finite_differences():
    rng = make_rng(73)
    a = np.array([[0.45, 0.5, 0.3, 0.25], [0.3, 0.3, 0.2, 0.2]])
    b = np.array([[0.55, 0.45, 0.25, 0.3], [0.7, 0.72, 0.25, 0.2]])
    d = rng.standard_normal(2)

    def f_a(theta):
        vals, cache = giou_batch(theta, b)
        da, _ = giou_batch_backward(cache, d)
        return float((vals * d).sum()), da
    assert grad_check(f_a, a) < 1e-6

    def f_b(theta):
        vals, cache = giou_batch(a, theta)
        _, db = giou_batch_backward(cache, d)
        return float((vals * d).sum()), db
    assert grad_check(f_b, b) < 1e-6


# ---------------------------------------------------------------------------
# set loss

def _uniform_detection(n, num_classes=2):
    return Detection(class_logits=np.zeros((n, num_classes + 1)),
                     boxes=np.full((n, 4), 0.5))


def test_set_loss_no_objects_closed_form():
    det = _uniform_detection(20)
    gt = GroundTruth(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    loss, _ = set_loss(det, gt)
    assert loss == pytest.approx(0.1 * 20 * math.log(3), rel=1e-12)


def test_set_loss_perfect_prediction_limit():
    gt = GroundTruth(np.array([[0.3, 0.4, 0.2, 0.2]]), np.array([1]))
    losses = []
    for margin in (2.0, 5.0, 40.0):
        logits = np.full((3, 3), 0.0)
        logits[0] = [-margin, margin, -margin]       # query 0: confident class 1
        logits[1:] = [-margin, -margin, margin]      # others: confident no-object
        boxes = np.full((3, 4), 0.5)
        boxes[0] = gt.boxes[0]
        loss, _ = set_loss(Detection(logits, boxes), gt)
        losses.append(loss)
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-12


def test_set_loss_permutation_invariant_in_gt_order():
    rng = make_rng(74)
    logits = rng.standard_normal((6, 3))
    boxes = np.column_stack([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.2, (6, 2))])
    gt_boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.15, 0.2], [0.5, 0.8, 0.1, 0.1]])
    labels = np.array([0, 1, 0])
    det = Detection(logits, boxes)
    base, _ = set_loss(det, GroundTruth(gt_boxes, labels))
    for perm in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
        loss, _ = set_loss(det, GroundTruth(gt_boxes[perm], labels[perm]))
        assert loss == pytest.approx(base, rel=1e-12)


def test_set_loss_gradcheck():
    rng = make_rng(75)
    logits = rng.standard_normal((5, 3))
    boxes = np.column_stack([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.1, 0.25, (5, 2))])
    gt = GroundTruth(np.array([[0.4, 0.4, 0.2, 0.25], [0.66, 0.6, 0.15, 0.2]]),
                     np.array([0, 1]))

    def compute():
        loss, cache = set_loss(Detection(logits, boxes), gt)
        return loss, set_loss_backward(cache)

    def f_logits(theta):
        loss, (dl, db) = compute()
        return loss, dl
    assert grad_check(f_logits, logits) < 1e-4

    def f_boxes(theta):
        loss, (dl, db) = compute()
        return loss, db
    assert grad_check(f_boxes, boxes) < 1e-4


# ---------------------------------------------------------------------------
# average precision

def _scored(boxes, scores, labels):
    return (np.asarray(scores, dtype=np.float64),
            np.asarray(labels, dtype=np.int64),
            np.asarray(boxes, dtype=np.float64).reshape(len(scores), 4))


def test_ap_perfect_detector():
    rng = make_rng(76)
    preds, gts = [], []
    for _ in range(4):
        boxes = np.column_stack([rng.uniform(0.3, 0.7, (2, 2)), rng.uniform(0.1, 0.3, (2, 2))])
        labels = rng.integers(0, 2, 2)
        gts.append(GroundTruth(boxes, labels))
        preds.append(_scored(boxes, np.ones(2), labels))
    ap, ap50, ap75 = evaluate_ap(preds, gts)
    assert (ap, ap50, ap75) == (1.0, 1.0, 1.0)


def test_ap_no_predictions():
    gts = [GroundTruth(np.array([[0.5, 0.5, 0.2, 0.2]]), np.array([0]))]
    preds = [_scored(np.zeros((0, 4)), [], [])]
    assert evaluate_ap(preds, gts) == (0.0, 0.0, 0.0)


def test_ap_handcrafted_pr_curve():
    # one TP at IoU 0.6 (score 0.9), one FP (score 0.8), two gts of one class
    g0 = [0.3, 0.3, 0.2, 0.2]
    g1 = [0.7, 0.7, 0.2, 0.2]
    # shift g0 horizontally by 0.05: IoU = 0.15/0.25 = 0.6
    p_tp = [0.35, 0.3, 0.2, 0.2]
    p_fp = [0.1, 0.9, 0.05, 0.05]
    gts = [GroundTruth(np.array([g0]), np.array([0])),
           GroundTruth(np.array([g1]), np.array([0])),
           GroundTruth(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))]
    preds = [_scored([p_tp], [0.9], [0]),
             _scored([p_fp], [0.8], [0]),
             _scored(np.zeros((0, 4)), [], [])]
    ap, ap50, ap75 = evaluate_ap(preds, gts)
    # hand-executed: thresholds 0.5/0.55/0.6 keep the TP -> PR points
    # (r=0.5, p=1), (r=0.5, p=0.5); 101-pt AP = 51/101. Above 0.6 all FP.
    want_low = 51 / 101
    assert ap50 == pytest.approx(want_low, abs=1e-12)
    assert ap75 == 0.0
    assert ap == pytest.approx(3 * want_low / 10, abs=1e-12)


def test_ap_invariant_to_prediction_order():
    rng = make_rng(77)
    boxes = np.column_stack([rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))])
    labels = np.array([0, 1, 0, 1])
    scores = np.array([0.9, 0.8, 0.7, 0.6])
    gt = GroundTruth(boxes[:2], labels[:2])
    base = evaluate_ap([_scored(boxes, scores, labels)], [gt])
    perm = [3, 1, 0, 2]
    shuffled = evaluate_ap([_scored(boxes[perm], scores[perm], labels[perm])], [gt])
    assert base == shuffled


def test_scored_detections_excludes_no_object():
    logits = np.array([[5.0, 0.0, 10.0],   # no-object wins but is excluded
                       [0.0, 3.0, -1.0]])
    det = Detection(logits, np.full((2, 4), 0.5))
    scores, labels, _ = scored_detections(det)
    assert labels.tolist() == [0, 1]
    assert scores[0] < 0.01 and scores[1] > 0.9
