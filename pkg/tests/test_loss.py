import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitlr import tensor as T
from vitlr.loss import (Box, LossConfig, batch_loss, ciou_loss, ciou_loss_tensor, focal_loss,
                        hungarian_match, iou, match_cost, total_loss)
from vitlr.model import Prediction
from helpers import gradcheck

A, B = Box(1, 1, 2, 2), Box(2, 2, 2, 2)

boxes = st.builds(Box, st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 10),
                  st.floats(0.5, 10))


def brute_force(cost):
    m, g = cost.shape
    return min(sum(cost[q, j] for j, q in enumerate(perm))
               for perm in itertools.permutations(range(m), g))


def test_iou_examples():
    assert iou(A, A) == 1.0
    assert iou(A, Box(10, 10, 1, 1)) == 0.0
    assert iou(A, B) == pytest.approx(1 / 7, abs=1e-6)


def test_ciou_examples():
    assert ciou_loss(A, B) == pytest.approx(0.968254, abs=1e-5)
    assert ciou_loss(A, A) == 0.0
    with pytest.raises(ValueError, match="degenerate"):
        ciou_loss(A, Box(0, 0, 0, 1))


@settings(max_examples=100, deadline=None)
@given(boxes, st.floats(-10, 10), st.floats(-10, 10), st.floats(0.2, 5))
def test_ciou_same_aspect_reduces(gt, dx, dy, s):
    pred = Box(gt.cx + dx, gt.cy + dy, gt.w * s, gt.h * s)
    px0, py0, px1, py1 = pred.corners()
    gx0, gy0, gx1, gy1 = gt.corners()
    c2 = (max(px1, gx1) - min(px0, gx0)) ** 2 + (max(py1, gy1) - min(py0, gy0)) ** 2
    expect = 1 - iou(pred, gt) + (dx * dx + dy * dy) / c2
    assert ciou_loss(pred, gt) == pytest.approx(expect, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_ciou_nonnegative_and_iou_symmetric(a, b):
    assert ciou_loss(a, b) >= 0
    assert iou(a, b) == iou(b, a)
    apart = max(abs(u - v) for u, v in zip(a.as_array(), b.as_array()))
    if apart > 1e-6:
        assert ciou_loss(a, b) > 0


@settings(max_examples=50, deadline=None)
@given(boxes, st.floats(3, 30), st.floats(0, 2 * math.pi))
def test_ciou_monotone_along_path(gt, dist, angle):
    losses = []
    for k in range(20):
        f = 1 - k / 19
        p = Box(gt.cx + f * dist * math.cos(angle), gt.cy + f * dist * math.sin(angle), gt.w, gt.h)
        losses.append(ciou_loss(p, gt))
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_ciou_tensor_matches_scalar():
    rng = np.random.default_rng(1)
    with T.precision(np.float64):
        pred = np.c_[rng.uniform(0, 20, (6, 2)), rng.uniform(1, 8, (6, 2))]
        gt = np.c_[rng.uniform(0, 20, (6, 2)), rng.uniform(1, 8, (6, 2))]
        got = ciou_loss_tensor(T.Tensor(pred), gt).data
    expect = [ciou_loss(Box(*p), Box(*g)) for p, g in zip(pred, gt)]
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_focal_examples():
    cfg = LossConfig(alpha=0.25, gamma=2)
    assert focal_loss([[0.9, 0.1]], [0], cfg).item() == pytest.approx(2.634e-4, abs=1e-7)
    assert focal_loss([[1.0, 0.0], [0.0, 1.0]], [0, 1], cfg).item() == 0
    p = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    ce = -np.log(0.5) - np.log(0.3)
    assert focal_loss(p, [1, 2], LossConfig(alpha=1, gamma=0)).item() == pytest.approx(ce, rel=1e-6)
    with pytest.raises(ValueError, match="out of range"):
        focal_loss(p, [0, 3])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_focal_monotone(p, dp):
    f = lambda q: focal_loss(np.array([[q, 1 - q]], np.float64), [0]).item()
    assert f(p) >= 0 and f(p + dp) <= f(p)


def test_config_invariants():
    for bad in (dict(ciou_weight=-1), dict(gamma=-0.1), dict(alpha=0), dict(alpha=1.5)):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_hungarian_examples():
    r = hungarian_match([[4, 1], [2, 3]])
    assert sorted(r.pairs) == [(0, 1), (1, 0)] and r.cost == 3
    eye = np.full((4, 3), 10.0)
    eye[[0, 1, 2], [0, 1, 2]] = 0
    assert hungarian_match(eye).pairs == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_match(eye).unmatched == [3]
    with pytest.raises(ValueError, match="exceed"):
        hungarian_match(np.zeros((2, 3)))


def test_hungarian_ties_are_deterministic():
    r = hungarian_match(np.zeros((3, 2)))
    assert r.pairs == [(0, 0), (1, 1)]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_hungarian_beats_random_assignments(g, extra, seed):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 5, (g + extra, g))
    r = hungarian_match(cost)
    qs = [q for q, _ in r.pairs]
    assert len(set(qs)) == g and sorted(j for _, j in r.pairs) == list(range(g))
    for _ in range(100):
        perm = rng.permutation(g + extra)[:g]
        assert r.cost <= cost[perm, np.arange(g)].sum() + 1e-12


def test_hungarian_matches_brute_force_small():
    rng = np.random.default_rng(3)
    for _ in range(30):
        g = rng.integers(1, 5)
        cost = rng.integers(0, 4, (g + rng.integers(0, 3), g)).astype(float)
        assert hungarian_match(cost).cost == brute_force(cost)


def _pred(boxes_, scores):
    return Prediction(T.Tensor(np.asarray(boxes_)[None]), T.Tensor(np.asarray(scores)[None]))


def test_total_loss_cases():
    gt = [(Box(10, 10, 4, 8), 1)]
    bg = np.array([[0.1, 0.1, 0.1, 0.7]] * 3)
    empty, match = total_loss(_pred(np.full((3, 4), 5.0), bg), [])
    assert match.pairs == [] and empty.item() == pytest.approx(
        focal_loss(bg, [3, 3, 3]).item(), rel=1e-6)

    perfect_scores = np.array([[0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 0, 1]], float)
    perfect_boxes = [[10, 10, 4, 8], [1, 1, 2, 2], [30, 3, 2, 2]]
    loss, match = total_loss(_pred(perfect_boxes, perfect_scores), gt)
    assert loss.item() == 0 and match.pairs == [(0, 0)]

    scores = np.array([[0.2, 0.5, 0.2, 0.1], [0.1, 0.1, 0.1, 0.7], [0.3, 0.3, 0.3, 0.1]])
    boxes_ = [[11, 9, 4, 6], [0, 0, 3, 3], [20, 20, 5, 5]]
    cfg = LossConfig(ciou_weight=0)
    loss, match = total_loss(_pred(boxes_, scores), gt, cfg)
    assert loss.item() == pytest.approx(focal_loss(scores, [1, 3, 3], cfg).item(), rel=1e-6)


def test_match_cost_formula():
    boxes_ = np.array([[11.0, 9, 4, 6], [0, 0, 3, 3]])
    probs = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    gts = [(Box(10, 10, 4, 8), 1)]
    cfg = LossConfig(match_class_weight=1.5, match_box_weight=0.5)
    cost = match_cost(boxes_, probs, gts, cfg)
    expect = 1.5 * (1 - 0.5) + 0.5 * ciou_loss(Box(11, 9, 4, 6), gts[0][0])
    assert cost[0, 0] == pytest.approx(expect)


def test_total_loss_gradient_with_match_fixed():
    rng = np.random.default_rng(4)
    gts = [(Box(10, 10, 4, 8), 1), (Box(3, 4, 2, 2), 0)]
    raw = rng.standard_normal((1, 4, 4))
    base_boxes = np.array([[[9.5, 10.3, 4.5, 7], [3.3, 3.2, 2.2, 3], [20, 2, 3, 3], [5, 15, 2, 2]]])
    cfg = LossConfig()
    with T.precision(np.float64):
        ref = Prediction(T.Tensor(base_boxes), T.softmax(T.Tensor(raw), axis=2))
        fixed = total_loss(ref, gts, cfg)[1].pairs

    def fn(b, s):
        pred = Prediction(b, T.softmax(s, axis=2))
        loss, match = total_loss(pred, gts, cfg)
        assert match.pairs == fixed
        return loss

    assert gradcheck(fn, [base_boxes, raw]) < 1e-3


def test_batch_loss_is_mean_of_clips():
    rng = np.random.default_rng(5)
    b = np.abs(rng.standard_normal((2, 3, 4))) + 1
    s = T.softmax(T.Tensor(rng.standard_normal((2, 3, 4))), axis=2)
    gts = [[(Box(1, 1, 2, 2), 0)], []]
    terms = batch_loss(Prediction(T.Tensor(b), s), gts)
    each = [total_loss(Prediction(T.Tensor(b), s), g, index=i)[0].item()
            for i, g in enumerate(gts)]
    assert terms.total.item() == pytest.approx(np.mean(each), rel=1e-5)
