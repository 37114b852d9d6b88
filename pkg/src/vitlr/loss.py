"""Training objective: focal classification + CIoU localization with
one-to-one query matching.

Scalar helpers (:func:`iou`, :func:`ciou_loss`) work on :class:`Box` values
in float64. The differentiable versions used in training operate on
:class:`~vitlr.tensor.Tensor` predictions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

_V_SCALE = 4.0 / math.pi ** 2


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class LossConfig:
    ciou_weight: float = 2.0     # lambda in L = L_focal + lambda * L_ciou
    alpha: float = 0.25
    gamma: float = 2.0
    match_class_weight: float = 1.0
    match_box_weight: float = 2.0

    def __post_init__(self):
        if self.ciou_weight < 0:
            raise ValueError("ciou_weight must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]          # (query, ground truth), sorted by gt
    unmatched: list[int]
    cost: float = 0.0

    def query_targets(self, m: int, gt_states: Sequence[int], background: int) -> np.ndarray:
        targets = np.full(m, background, dtype=np.intp)
        for q, g in self.pairs:
            targets[q] = gt_states[g]
        return targets


# ---------------------------------------------------------------------------
# scalar geometry

def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def ciou_loss(pred: Box, gt: Box) -> float:
    """1 - (IoU - d^2/c^2 - alpha*v): zero for identical boxes, up to 2 otherwise."""
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError(f"degenerate ground-truth box: w={gt.w}, h={gt.h}")
    if pred.w <= 0 or pred.h <= 0:
        raise ValueError(f"degenerate predicted box: w={pred.w}, h={pred.h}")
    i = iou(pred, gt)
    d2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    px0, py0, px1, py1 = pred.corners()
    gx0, gy0, gx1, gy1 = gt.corners()
    c2 = (max(px1, gx1) - min(px0, gx0)) ** 2 + (max(py1, gy1) - min(py0, gy0)) ** 2
    v = _V_SCALE * (math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)) ** 2
    alpha = 0.0 if v == 0 else v / ((1 - i) + v)
    # rounding in the IoU can leave identical boxes a hair below zero
    return max(0.0, 1.0 - (i - d2 / c2 - alpha * v))


# ---------------------------------------------------------------------------
# differentiable losses

def ciou_loss_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Per-pair CIoU loss for pred [k, 4] against constant gt [k, 4] -> [k]."""
    gt = np.asarray(gt, dtype=T.default_dtype()).reshape(-1, 4)
    if (gt[:, 2:] <= 0).any():
        raise ValueError("degenerate ground-truth box (w or h <= 0)")
    col = [T.reshape(T.take(pred, [j], axis=1), (-1,)) for j in range(4)]
    px, py, pw, ph = col
    gx, gy, gw, gh = (gt[:, j] for j in range(4))
    hw, hh = T.scale(pw, 0.5), T.scale(ph, 0.5)
    pl, pr = T.sub(px, hw), T.add(px, hw)
    pt, pb = T.sub(py, hh), T.add(py, hh)
    gl, gr, gt_, gb = gx - gw / 2, gx + gw / 2, gy - gh / 2, gy + gh / 2
    iw = T.clamp_min(T.sub(T.minimum(pr, gr), T.maximum(pl, gl)), 0.0)
    ih = T.clamp_min(T.sub(T.minimum(pb, gb), T.maximum(pt, gt_)), 0.0)
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(pw, ph), gw * gh), inter)
    i = T.div(inter, union)
    d2 = T.add(T.square(T.sub(px, gx)), T.square(T.sub(py, gy)))
    cw = T.sub(T.maximum(pr, gr), T.minimum(pl, gl))
    ch = T.sub(T.maximum(pb, gb), T.minimum(pt, gt_))
    c2 = T.add(T.square(cw), T.square(ch))
    v = T.scale(T.square(T.sub(np.arctan(gw / gh), T.arctan(T.div(pw, ph)))), _V_SCALE)
    # alpha = v / ((1 - iou) + v); the clamp only matters when both terms vanish
    alpha = T.div(v, T.clamp_min(T.add(T.sub(1.0, i), v), 1e-12))
    score = T.sub(T.sub(i, T.div(d2, c2)), T.mul(alpha, v))
    return T.sub(1.0, score)


_LOG_FLOOR = 1e-7


def focal_loss(probs, targets, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over rows of -alpha * (1 - p_t)^gamma * log(p_t).

    ``probs`` is [m, l+1] (rows are distributions), ``targets`` holds one
    class index per row.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if probs.ndim != 2:
        raise ValueError(f"focal_loss expects [m, classes] probabilities, got {probs.shape}")
    m, k = probs.shape
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if targets.shape[0] != m:
        raise ValueError(f"{targets.shape[0]} targets for {m} rows")
    if ((targets < 0) | (targets >= k)).any():
        bad = targets[(targets < 0) | (targets >= k)][0]
        raise ValueError(f"target class {bad} out of range [0, {k - 1}]")
    flat = T.reshape(probs, (m * k,))
    pt = T.take(flat, np.arange(m) * k + targets)
    logp = T.log(T.clamp_min(pt, _LOG_FLOOR))
    if cfg.gamma == 0:
        per = T.neg(logp)
    else:
        per = T.neg(T.mul(T.pow_scalar(T.sub(1.0, pt), cfg.gamma), logp))
    return T.scale(T.tsum(per), cfg.alpha)


# ---------------------------------------------------------------------------
# matching

def _solve_lap(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting path with dual potentials; returns the column of
    each row.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)      # p[j]: row (1-based) owning column j
    way = np.zeros(m + 1, dtype=np.intp)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def _opt_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    cols = _solve_lap(cost)
    return float(cost[np.arange(cost.shape[0]), cols].sum())


def hungarian_match(cost) -> MatchResult:
    """Optimal one-to-one assignment of G ground truths to m queries.

    ``cost`` is [m, G]. Among equal-cost optima, ground truth 0 takes the
    lowest query index that still allows an optimum, then ground truth 1,
    and so on.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be an m x G matrix, got shape {cost.shape}")
    m, g = cost.shape
    if g > m:
        raise ValueError(f"{g} ground truths exceed {m} queries")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if g == 0:
        return MatchResult([], list(range(m)), 0.0)
    ct = cost.T  # rows = ground truths
    best = _opt_cost(ct)
    tol = 1e-9 * (1.0 + abs(best))
    chosen: list[int] = []
    fixed = 0.0
    rows_left = list(range(g))
    cols_left = list(range(m))
    for gi in range(g):
        rows_left.remove(gi)
        for q in list(cols_left):
            rest_cols = [c for c in cols_left if c != q]
            sub = ct[np.ix_(rows_left, rest_cols)] if rows_left else np.zeros((0, 0))
            total = fixed + ct[gi, q] + _opt_cost(sub)
            if total <= best + tol:
                chosen.append(q)
                fixed += ct[gi, q]
                cols_left = rest_cols
                break
        else:  # pragma: no cover - unreachable with a correct solver
            raise RuntimeError("assignment solver failed to reproduce its optimum")
    pairs = [(q, gi) for gi, q in enumerate(chosen)]
    used = set(chosen)
    total = float(sum(cost[q, gi] for q, gi in pairs))
    return MatchResult(pairs, [q for q in range(m) if q not in used], total)


# ---------------------------------------------------------------------------
# full objective

@dataclass
class LossTerms:
    total: Tensor
    focal: float
    ciou: float
    matches: list[MatchResult] = field(default_factory=list)


def match_cost(boxes: np.ndarray, probs: np.ndarray, gts: Sequence[tuple[Box, int]],
               cfg: LossConfig) -> np.ndarray:
    m = boxes.shape[0]
    cost = np.zeros((m, len(gts)))
    for j, (gbox, state) in enumerate(gts):
        for q in range(m):
            pb = Box(*map(float, boxes[q]))
            cost[q, j] = (cfg.match_class_weight * (1.0 - float(probs[q, state]))
                          + cfg.match_box_weight * ciou_loss(pb, gbox))
    return cost


def _clip_loss(boxes: Tensor, probs: Tensor, gts, cfg: LossConfig):
    m, k = probs.shape
    background = k - 1
    for _, state in gts:
        if not 0 <= state < background:
            raise ValueError(f"ground-truth state {state} out of range [0, {background - 1}]")
    match = hungarian_match(match_cost(boxes.data, probs.data, gts, cfg)) if gts else \
        MatchResult([], list(range(m)), 0.0)
    targets = match.query_targets(m, [s for _, s in gts], background)
    lf = focal_loss(probs, targets, cfg)
    if match.pairs:
        qidx = [q for q, _ in match.pairs]
        gt_arr = np.stack([gts[g][0].as_array() for _, g in match.pairs])
        lc = T.tsum(ciou_loss_tensor(T.take(boxes, qidx, axis=0), gt_arr))
    else:
        lc = None
    return lf, lc, match


def total_loss(pred, gts: Sequence[tuple[Box, int]], cfg: LossConfig = LossConfig(),
               index: int = 0) -> tuple[Tensor, MatchResult]:
    """L_focal over all queries + lambda * L_ciou over matched pairs for one clip.

    ``pred`` is a :class:`~vitlr.model.Prediction`; ``index`` selects the
    clip inside a batched prediction.
    """
    boxes, probs = _clip_tensors(pred, index)
    lf, lc, match = _clip_loss(boxes, probs, list(gts), cfg)
    if lc is None or cfg.ciou_weight == 0:
        return lf, match
    return T.add(lf, T.scale(lc, cfg.ciou_weight)), match


def batch_loss(pred, batch_gts: Sequence[Sequence[tuple[Box, int]]],
               cfg: LossConfig = LossConfig()) -> LossTerms:
    """Mean of per-clip losses over a batched prediction."""
    if len(batch_gts) != pred.batch:
        raise ValueError(f"{len(batch_gts)} annotation sets for batch of {pred.batch}")
    focal_terms, ciou_terms, matches = [], [], []
    for i, gts in enumerate(batch_gts):
        boxes, probs = _clip_tensors(pred, i)
        lf, lc, match = _clip_loss(boxes, probs, list(gts), cfg)
        focal_terms.append(lf)
        if lc is not None:
            ciou_terms.append(lc)
        matches.append(match)
    b = len(batch_gts)
    focal = _sum(focal_terms)
    total = T.scale(focal, 1.0 / b)
    ciou_val = 0.0
    if ciou_terms:
        ciou = _sum(ciou_terms)
        ciou_val = ciou.item() / b
        if cfg.ciou_weight:
            total = T.add(total, T.scale(ciou, cfg.ciou_weight / b))
    return LossTerms(total, focal.item() / b, ciou_val, matches)


def _sum(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def _clip_tensors(pred, index: int):
    m = pred.boxes.shape[1]
    k = pred.scores.shape[2]
    if pred.batch == 1:
        boxes = T.reshape(pred.boxes, (m, 4))
        probs = T.reshape(pred.scores, (m, k))
    else:
        boxes = T.reshape(T.take(pred.boxes, [index], axis=0), (m, 4))
        probs = T.reshape(T.take(pred.scores, [index], axis=0), (m, k))
    return boxes, probs


__all__ = ["Box", "LossConfig", "MatchResult", "LossTerms", "iou", "ciou_loss",
           "ciou_loss_tensor", "focal_loss", "hungarian_match", "total_loss", "batch_loss",
           "match_cost"]
