import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitlr.loss import Box
from vitlr.metrics import (Detection, GroundTruth, average_precision, bucket_eval, decode,
                           evaluate, evaluate_model, fps_bench, match_detections, mean_ap, prf,
                           summarize, write_reports_csv)
from vitlr.model import PRESETS, Prediction, ViTLRModel
from vitlr import tensor as T
from vitlr.train import load_clips
from helpers import brute_ap, brute_match, brute_prf, random_scene

G = GroundTruth(Box(10, 10, 4, 8), 1)


def det(conf, state=1, box=G.box, frame=0):
    return Detection(box, state, conf, frame)


def test_match_examples():
    assert match_detections([det(0.9)], [G]) == ([True], 0)
    assert match_detections([det(0.9, state=2)], [G]) == ([False], 1)
    assert match_detections([det(0.6), det(0.9)], [G]) == ([False, True], 0)
    assert match_detections([det(0.9, frame=1)], [G]) == ([False], 1)


def test_ap_hand_cases():
    assert average_precision([det(0.9)], [G], 1) == 1.0
    far = Box(50, 50, 4, 8)
    assert average_precision([det(0.9, box=far), det(0.8)], [G], 1) == 0.5
    assert average_precision([], [G], 1) == 0.0
    assert average_precision([det(0.9)], [G], 2) is None
    assert mean_ap({0: 1.0, 1: 0.5, 2: None}) == 0.75
    with pytest.raises(ValueError):
        mean_ap({0: None})


def test_prf_examples():
    assert prf(10, 0, 0) == (1, 1, 1)
    assert prf(1, 1, 1) == (0.5, 0.5, 0.5)
    p, r, f = prf(3, 1, 2)
    assert (p, r) == (0.75, 0.6) and f == pytest.approx(2 * 0.45 / 1.35)
    assert prf(0, 0, 0) == (0, 0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_match_brute_force(seed):
    dets, gts = random_scene(np.random.default_rng(seed))
    assert match_detections(dets, gts) == brute_match(dets, gts)
    for c in range(4):
        a, b = average_precision(dets, gts, c), brute_ap(dets, gts, c)
        assert (a is None and b is None) or a == pytest.approx(b, abs=1e-12)
    if gts:
        r = evaluate(dets, gts, 4)
        assert (r.precision, r.recall, r.f1) == pytest.approx(brute_prf(dets, gts))
        assert r.tp + r.fn == len(gts) and r.tp + r.fp == len(dets)
        assert all(0 <= v <= 1 for v in r.ap.values())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_depends_only_on_rank(seed):
    dets, gts = random_scene(np.random.default_rng(seed))
    squashed = [Detection(d.box, d.state, d.confidence ** 3, d.frame) for d in dets]
    for c in range(4):
        assert average_precision(dets, gts, c) == average_precision(squashed, gts, c)


def test_decode_skips_background_and_floor():
    scores = np.array([[[0.7, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.7], [0.04, 0.03, 0.03, 0.9]]])
    boxes = np.array([[[1, 2, 3, 4], [5, 6, 7, 8], [1, 1, 1, 1]]], float)
    out = decode(Prediction(T.Tensor(boxes), T.Tensor(scores)))
    assert len(out) == 1 and out[0].state == 0 and out[0].confidence == pytest.approx(0.7)
    with pytest.raises(ValueError):
        Detection(G.box, 0, 1.5)


def test_bucket_reports_and_csv(tmp_path, easy_small):
    clips = load_clips(easy_small / "test")
    model = ViTLRModel(PRESETS["tiny"].replace(n=2))
    reports = bucket_eval(model, clips, "scenario")
    assert [r.bucket for r in reports] == ["easy"]
    dist = bucket_eval(model, clips, "distance")
    assert [r.bucket for r in dist] == ["<20m"]
    frames = bucket_eval({"n=1": ViTLRModel(PRESETS["tiny"].replace(n=1)), "n=2": model}, clips,
                         "frames-n")
    assert [r.bucket for r in frames] == ["n=1", "n=2"]
    path = write_reports_csv(frames, tmp_path / "r.csv")
    rows = list(csv.reader(open(path)))
    assert len(rows) == 3 and rows[0][:3] == ["bucket", "class", "ap"]
    assert "n=2" in summarize(frames)
    with pytest.raises(ValueError):
        bucket_eval(model, clips, "weather")
    assert evaluate_model(model, clips).fn + evaluate_model(model, clips).tp == sum(
        len(c.ann.targets(len(c.frames) - 1)) for c in clips)


def test_fps_bench():
    rng = np.random.default_rng(0)

    def bench(n, reps=5):
        cfg = PRESETS["tiny"].replace(n=n)
        clip = rng.uniform(0, 1, (n, 3, cfg.h, cfg.w))
        return fps_bench(ViTLRModel(cfg), [clip], warmup=1, reps=reps)

    three, five = bench(3), bench(5)
    assert three["fps"] > 0 and "platform" in three["machine"]
    assert five["median_s"] >= three["median_s"]
    again = bench(3, reps=10)
    spread = max(three["p90_s"] - three["p10_s"], again["p90_s"] - again["p10_s"])
    assert abs(again["median_s"] - three["median_s"]) <= spread + 0.05 * three["median_s"]
    with pytest.raises(ValueError):
        fps_bench(ViTLRModel(PRESETS["micro"]), [], reps=3)
