"""Detection evaluation: IoU>0.5 matching gated on state, AP/mAP,
precision/recall/F1, FPS, and bucketed reports."""
from __future__ import annotations

import csv
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .loss import Box, iou
from .model import Prediction, ViTLRModel, model_forward

CONF_FLOOR = 0.05
IOU_THRESHOLD = 0.5
CSV_HEADER = ["bucket", "class", "ap", "map", "precision", "recall", "f1", "tp", "fp", "fn"]


@dataclass(frozen=True)
class Detection:
    box: Box
    state: int
    confidence: float
    frame: Hashable = 0
    query: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    state: int
    frame: Hashable = 0


@dataclass
class EvalReport:
    map: float
    ap: dict[int, float]
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    bucket: str | None = None

    def csv_row(self) -> list:
        return [self.bucket or "all", "all", f"{self.map:.6f}", f"{self.map:.6f}",
                f"{self.precision:.6f}", f"{self.recall:.6f}", f"{self.f1:.6f}",
                self.tp, self.fp, self.fn]


def decode(pred: Prediction, index: int = 0, frame: Hashable = 0,
           floor: float = CONF_FLOOR) -> list[Detection]:
    """Queries whose argmax is a real state and whose confidence clears ``floor``."""
    scores = pred.scores.data[index].astype(np.float64)
    boxes = pred.boxes.data[index].astype(np.float64)
    background = scores.shape[1] - 1
    out = []
    for q in range(scores.shape[0]):
        k = int(np.argmax(scores[q]))
        if k == background:
            continue
        conf = float(scores[q, :background].max())
        if conf < floor:
            continue
        out.append(Detection(Box(*boxes[q]), k, min(conf, 1.0), frame, q))
    return out


def _by_frame(items):
    groups: dict = {}
    for i, it in enumerate(items):
        groups.setdefault(it.frame, []).append(i)
    return groups


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float = IOU_THRESHOLD) -> tuple[list[bool], int]:
    """Greedy matching in descending confidence (stable for ties).

    A detection is a true positive when it overlaps an unmatched ground
    truth of the same state and frame with IoU above the threshold; it
    takes the best-overlapping such ground truth. Returns one TP flag per
    detection (input order) and the number of unmatched ground truths.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    gt_frames = _by_frame(gts)
    taken = [False] * len(gts)
    tp = [False] * len(dets)
    for i in order:
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for j in gt_frames.get(d.frame, ()):
            if taken[j] or gts[j].state != d.state:
                continue
            o = iou(d.box, gts[j].box)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return tp, taken.count(False)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], cls: int,
                      iou_threshold: float = IOU_THRESHOLD) -> float | None:
    """All-point interpolated AP for one state; ``None`` if it has no ground truth."""
    cd = [d for d in dets if d.state == cls]
    cg = [g for g in gts if g.state == cls]
    if not cg:
        return None
    flags, _ = match_detections(cd, cg, iou_threshold)
    order = sorted(range(len(cd)), key=lambda i: -cd[i].confidence)
    hits = np.array([flags[i] for i in order], dtype=float)
    if hits.size == 0:
        return 0.0
    ctp = np.cumsum(hits)
    precision = ctp / np.arange(1, len(hits) + 1)
    recall = ctp / len(cg)
    # precision envelope: running max from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def mean_ap(aps: Mapping[int, float | None]) -> float:
    vals = [v for v in aps.values() if v is not None]
    if not vals:
        raise ValueError("no class has ground truth; mAP is undefined")
    return float(sum(vals) / len(vals))


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_states: int,
             bucket: str | None = None, iou_threshold: float = IOU_THRESHOLD) -> EvalReport:
    aps = {c: average_precision(dets, gts, c, iou_threshold) for c in range(num_states)}
    flags, fn = match_detections(dets, gts, iou_threshold)
    tp = sum(flags)
    fp = len(flags) - tp
    p, r, f1 = prf(tp, fp, fn)
    present = {c: a for c, a in aps.items() if a is not None}
    m = mean_ap(aps) if present else 0.0
    return EvalReport(m, present, p, r, f1, tp, fp, fn, bucket)


# ---------------------------------------------------------------------------
# running a model over clips

def clip_detections(model: ViTLRModel, clips, batch: int = 8) -> tuple[list[Detection],
                                                                      list[GroundTruth]]:
    """Evaluate every clip at its last frame (window = last n frames)."""
    from .train import clip_window

    n = model.cfg.n
    model.eval()
    dets: list[Detection] = []
    gts: list[GroundTruth] = []
    usable = [c for c in clips if len(c.frames) >= n]
    for start in range(0, len(usable), batch):
        chunk = usable[start: start + batch]
        x = np.stack([clip_window(c.frames, len(c.frames) - 1, n) for c in chunk])
        pred = model_forward(model, x)
        for i, c in enumerate(chunk):
            key = (c.path or c.ann.clip_id, len(c.frames) - 1)
            dets.extend(decode(pred, i, key))
            gts.extend(GroundTruth(b, s, key) for b, s in c.ann.targets(len(c.frames) - 1))
    return dets, gts


def evaluate_model(model: ViTLRModel, clips, bucket: str | None = None) -> EvalReport:
    dets, gts = clip_detections(model, clips)
    num_states = clips[0].ann.num_states if clips else model.cfg.l
    return evaluate(dets, gts, num_states, bucket)


BUCKETINGS = ("distance", "scenario", "frames-n")


def bucket_key(clip, bucketing: str) -> str:
    if bucketing == "distance":
        return clip.ann.distance or "unknown"
    if bucketing == "scenario":
        return "+".join(clip.ann.tags) if clip.ann.tags else "untagged"
    raise ValueError(f"unknown bucketing {bucketing!r}, expected one of {BUCKETINGS}")


def bucket_eval(models: ViTLRModel | Mapping[str, ViTLRModel], clips, bucketing: str
                ) -> list[EvalReport]:
    """One report per bucket.

    For ``distance`` / ``scenario`` a single model is evaluated on clip
    groups; for ``frames-n`` ``models`` maps a bucket label to a model
    (e.g. ``{"n=1": m1, "n=3": m3}``) and each runs on all clips.
    """
    if bucketing not in BUCKETINGS:
        raise ValueError(f"unknown bucketing {bucketing!r}, expected one of {BUCKETINGS}")
    if bucketing == "frames-n":
        if isinstance(models, ViTLRModel):
            models = {f"n={models.cfg.n}": models}
        return [evaluate_model(m, clips, key) for key, m in models.items()]
    if not isinstance(models, ViTLRModel):
        raise ValueError(f"{bucketing} bucketing evaluates a single model")
    groups: dict[str, list] = {}
    for c in clips:
        groups.setdefault(bucket_key(c, bucketing), []).append(c)
    order = _bucket_order(groups, bucketing)
    return [evaluate_model(models, groups[k], k) for k in order]


def _bucket_order(groups, bucketing):
    from .synth import DISTANCES, TAGS

    ref = DISTANCES if bucketing == "distance" else TAGS
    rank = {k: i for i, k in enumerate(ref)}
    return sorted(groups, key=lambda k: (rank.get(k, len(ref)), k))


def write_reports_csv(reports: Sequence[EvalReport], path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())
    return p


def summarize(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'bucket':<14}{'mAP':>8}{'P':>8}{'R':>8}{'F1':>8}{'TP':>6}{'FP':>6}{'FN':>6}"]
    for r in reports:
        lines.append(f"{(r.bucket or 'all'):<14}{r.map:8.3f}{r.precision:8.3f}{r.recall:8.3f}"
                     f"{r.f1:8.3f}{r.tp:6d}{r.fp:6d}{r.fn:6d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# throughput

def machine_descriptor() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or "unknown",
            "python": platform.python_version(), "numpy": np.__version__,
            "cpus": os.cpu_count()}


def fps_bench(model: ViTLRModel, clips: Sequence[np.ndarray], warmup: int = 2,
              reps: int = 10) -> dict:
    """Wall-clock latency of single-clip ``model_forward`` calls.

    ``clips`` are float arrays [n, c, h, w]; they are cycled through.
    Returns median/p10/p90 latency (s), FPS = 1 / median, and the machine.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if not clips:
        raise ValueError("need at least one clip")
    model.eval()
    for i in range(warmup):
        model_forward(model, clips[i % len(clips)])
    lat = []
    for i in range(reps):
        t0 = time.perf_counter()
        model_forward(model, clips[i % len(clips)])
        lat.append(time.perf_counter() - t0)
    med = statistics.median(lat)
    q = np.percentile(lat, [10, 90])
    return {"median_s": med, "p10_s": float(q[0]), "p90_s": float(q[1]),
            "fps": 1.0 / med, "reps": reps, "machine": machine_descriptor()}


__all__ = ["Detection", "GroundTruth", "EvalReport", "decode", "match_detections", "prf",
           "average_precision", "mean_ap", "evaluate", "clip_detections", "evaluate_model",
           "bucket_eval", "write_reports_csv", "summarize", "fps_bench", "CSV_HEADER",
           "CONF_FLOOR", "BUCKETINGS"]
