"""Shared test oracles."""
import itertools

import numpy as np

from vitlr import tensor as T


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    out[i, o, r, c] = np.sum(
                        xp[i, :, r * stride: r * stride + k, c * stride: c * stride + k] * w[o])
                    if b is not None:
                        out[i, o, r, c] += b[o]
    return out


def block_diagonal(dw):
    c, _, k, _ = dw.shape
    full = np.zeros((c, c, k, k), dtype=dw.dtype)
    for i in range(c):
        full[i, i] = dw[i, 0]
    return full


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def gradcheck(fn, arrays, h=1e-3, seed=0):
    """Largest relative error between tape gradients and central differences.

    ``fn`` maps named float64 tensors to a tensor; the check differentiates a
    fixed random projection of its output so every element contributes.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        vals = [np.asarray(a, np.float64) for a in arrays]
        with T.Tape() as tape:
            ins = [T.Tensor(v, name=f"in{i}") for i, v in enumerate(vals)]
            out = fn(*ins)
            probe = rng.standard_normal(out.shape)
            loss = T.tsum(T.mul(out, T.Tensor(probe)))
        grads = T.backward(tape, loss, ins)
        worst = 0.0
        for i, v in enumerate(vals):
            num = np.zeros_like(v)
            for idx in itertools.product(*map(range, v.shape)):
                vp, vm = [u.copy() for u in vals], [u.copy() for u in vals]
                vp[i][idx] += h
                vm[i][idx] -= h
                fp = float(np.sum(fn(*[T.Tensor(u) for u in vp]).data * probe))
                fm = float(np.sum(fn(*[T.Tensor(u) for u in vm]).data * probe))
                num[idx] = (fp - fm) / (2 * h)
            worst = max(worst, rel_err(grads[f"in{i}"], num))
        return worst


def model_gradcheck(cfg, samples=120, h=1e-3, seed=0):
    """Relative error of tape gradients against central differences on a
    random scalar loss through the full forward pass (float64).

    The check covers ``samples`` randomly chosen parameter coordinates
    spread over every parameter tensor.
    """
    from vitlr.model import ViTLRModel, model_forward

    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        model = ViTLRModel(cfg).train()
        # perturb zero-initialized branches so every path carries gradient
        for k, p in model.params.items():
            model.params[k] = T.Tensor(p.data + rng.normal(0, 0.05, p.shape), name=k)
        clip = rng.uniform(0, 1, (cfg.n, cfg.c, cfg.h, cfg.w))
        rb = rng.standard_normal((1, cfg.m, 4)) / max(cfg.h, cfg.w)
        rs = rng.standard_normal((1, cfg.m, cfg.l + 1))

        def loss_of():
            pred = model_forward(model, clip)
            return T.add(T.tsum(T.mul(pred.boxes, T.Tensor(rb))),
                         T.tsum(T.mul(pred.scores, T.Tensor(rs))))

        with T.Tape() as tape:
            loss = loss_of()
        grads = T.backward(tape, loss, model.params)
        names = sorted(model.params)
        picks = [names[i % len(names)] for i in range(samples)]
        analytic, numeric = [], []
        for name in picks:
            base = model.params[name].data
            idx = tuple(int(rng.integers(0, d)) for d in base.shape)
            vals = []
            for sign in (1, -1):
                arr = base.copy()
                arr[idx] += sign * h
                model.params[name] = T.Tensor(arr, name=name)
                vals.append(loss_of().item())
            model.params[name] = T.Tensor(base, name=name)
            analytic.append(grads[name][idx])
            numeric.append((vals[0] - vals[1]) / (2 * h))
        return rel_err(analytic, numeric)


def brute_match(dets, gts, thr=0.5):
    """Reference greedy labelling written straight from the definition."""
    from vitlr.loss import iou

    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    used, tp = set(), [False] * len(dets)
    for i in order:
        cands = [(iou(dets[i].box, g.box), -j) for j, g in enumerate(gts)
                 if j not in used and g.frame == dets[i].frame and g.state == dets[i].state
                 and iou(dets[i].box, g.box) > thr]
        if cands:
            used.add(-max(cands)[1])
            tp[i] = True
    return tp, len(gts) - len(used)


def brute_ap(dets, gts, cls, thr=0.5):
    """AP as the exact integral of interpolated precision over recall."""
    cd = [d for d in dets if d.state == cls]
    cg = [g for g in gts if g.state == cls]
    if not cg:
        return None
    tp, _ = brute_match(cd, cg, thr)
    order = sorted(range(len(cd)), key=lambda i: -cd[i].confidence)
    points = []
    hits = 0
    for rank, i in enumerate(order, 1):
        hits += tp[i]
        points.append((hits / len(cg), hits / rank))
    recalls = sorted({r for r, _ in points} | {0.0})
    area = 0.0
    for lo, hi in zip(recalls, recalls[1:]):
        area += (hi - lo) * max(p for r, p in points if r >= hi)
    return area


def brute_prf(dets, gts, thr=0.5):
    tp, fn = brute_match(dets, gts, thr)
    tp, fp = sum(tp), len(tp) - sum(tp)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def random_scene(rng, frames=3, states=4):
    """Ground truths and detections with jittered, missing and spurious boxes
    plus tied confidences."""
    from vitlr.loss import Box
    from vitlr.metrics import Detection, GroundTruth

    gts, dets = [], []
    for f in range(frames):
        for _ in range(rng.integers(0, 4)):
            box = Box(*rng.uniform(5, 60, 2), *rng.uniform(4, 12, 2))
            gts.append(GroundTruth(box, int(rng.integers(0, states)), f))
            for _ in range(rng.integers(0, 3)):
                jit = Box(box.cx + rng.normal(0, 1.5), box.cy + rng.normal(0, 1.5),
                          box.w * rng.uniform(0.7, 1.3), box.h * rng.uniform(0.7, 1.3))
                state = gts[-1].state if rng.random() < 0.8 else int(rng.integers(0, states))
                dets.append(Detection(jit, state, float(np.round(rng.uniform(0.05, 1), 1)), f))
        for _ in range(rng.integers(0, 2)):
            dets.append(Detection(Box(*rng.uniform(5, 60, 2), *rng.uniform(4, 12, 2)),
                                  int(rng.integers(0, states)), float(rng.uniform(0.05, 1)), f))
    return dets, gts
