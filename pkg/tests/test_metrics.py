import dataclasses
import math

import numpy as np
import pytest
import torch

from bevlab.geometry import Box3D
from bevlab.metrics import (
    DEFAULT_THRESHOLDS,
    match_and_ap,
    latency_report,
    param_report,
)
from bevlab.model import SceneBatch, build_model
from bevlab.scenes import generate_scene
from oracles import ap_per_class_ref


def _box(x, y, cls=0):
    return Box3D((x, y, 0.8), (4.0, 2.0, 1.6), 0.0, cls)


def test_perfect_predictions_have_ap_one():
    gts = [[_box(0, 0), _box(5, 5, 1)], [_box(-3, 2)]]
    preds = [[(b, 1.0) for b in scene] for scene in gts]
    report = match_and_ap(preds, gts)
    for per_thr in report.ap.values():
        for v in per_thr.values():
            assert v == pytest.approx(1.0)
    assert report.mean_ap == pytest.approx(1.0)
    assert report.mean_translation_error == pytest.approx(0.0)


def test_no_predictions_ap_zero():
    gts = [[_box(0, 0)]]
    report = match_and_ap([[]], gts)
    assert report.mean_ap == pytest.approx(0.0)
    assert report.counts[str(DEFAULT_THRESHOLDS[0])]["fn"] == 1


def test_handcrafted_case_matches_enumeration_oracle():
    gts = [[_box(0.0, 0.0), _box(4.0, 0.0)]]
    preds = [[
        (_box(0.3, 0.0), 0.9),   # 0.3 m from gt0
        (_box(4.9, 0.0), 0.8),   # 0.9 m from gt1
        (_box(9.0, 0.0), 0.7),   # far from everything
    ]]
    for thr in (0.25, 0.5, 1.0, 2.0):
        report = match_and_ap(preds, gts, thresholds=(thr,))
        got = report.ap["class_0"][str(thr)]
        ref = ap_per_class_ref(preds, gts, thr, 0)
        assert got == pytest.approx(ref, abs=1e-12), thr


def test_randomized_micro_cases_match_oracle():
    rng = np.random.default_rng(42)
    for case in range(50):
        n_scenes = int(rng.integers(1, 3))
        gts, preds = [], []
        for _ in range(n_scenes):
            gts.append([
                _box(float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)),
                     int(rng.integers(2)))
                for _ in range(int(rng.integers(0, 4)))
            ])
            preds.append([
                (_box(float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)),
                      int(rng.integers(2))), float(rng.uniform(0, 1)))
                for _ in range(int(rng.integers(0, 5)))
            ])
        thresholds = (0.5, 1.0, 2.0)
        report = match_and_ap(preds, gts, thresholds=thresholds)
        for cls in (0, 1):
            for thr in thresholds:
                ref = ap_per_class_ref(preds, gts, thr, cls)
                got = report.ap.get(f"class_{cls}", {}).get(str(thr))
                if ref is None:
                    assert got is None
                else:
                    assert got == pytest.approx(ref, abs=1e-12), (case, cls, thr)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(7)
    for _ in range(20):
        gts = [[_box(float(rng.uniform(-8, 8)), float(rng.uniform(-8, 8)))
                for _ in range(int(rng.integers(1, 4)))]]
        preds = [[(_box(float(rng.uniform(-8, 8)), float(rng.uniform(-8, 8))),
                   float(rng.uniform(0, 1))) for _ in range(int(rng.integers(0, 5)))]]
        report = match_and_ap(preds, gts)
        aps = [report.ap["class_0"][str(t)] for t in DEFAULT_THRESHOLDS]
        for lo, hi in zip(aps, aps[1:]):
            assert hi >= lo - 1e-12


def test_low_score_false_positive_never_raises_ap():
    gts = [[_box(0, 0), _box(6, 0)]]
    preds = [[(_box(0.2, 0), 0.9), (_box(6.4, 0), 0.6)]]
    base = match_and_ap(preds, gts).mean_ap
    worse = [[*preds[0], (_box(-9, -9), 0.1)]]
    assert match_and_ap(worse, gts).mean_ap <= base + 1e-12


def test_classes_without_gt_are_excluded_from_mean():
    gts = [[_box(0, 0, cls=0)]]
    preds = [[(_box(0.1, 0, cls=0), 0.9), (_box(5, 5, cls=1), 0.8)]]
    report = match_and_ap(preds, gts)
    assert report.ap["class_1"][str(DEFAULT_THRESHOLDS[0])] is None
    assert report.mean_ap == pytest.approx(1.0)  # only class 0 counts


def test_param_report_partition_and_stability(micro_cfg):
    model = build_model(micro_cfg)
    before = param_report(model)
    total = sum(p.numel() for p in model.parameters())
    assert before.base_count + before.prompter_count == total
    assert before.prompter_count > 0

    # one optimizer step must not change any count
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    scene = generate_scene(micro_cfg.world, 0)
    batch = SceneBatch.from_scenes([scene])
    comp, _ = model.forward_train(batch, micro_cfg.weights, True)
    opt.zero_grad()
    sum(comp.values()).backward()
    opt.step()
    after = param_report(model)
    assert (after.base_count, after.prompter_count) == (before.base_count, before.prompter_count)


def test_param_report_baseline_has_zero_prompter(micro_cfg):
    cfg = dataclasses.replace(micro_cfg, mode="camera_baseline")
    report = param_report(build_model(cfg))
    assert report.prompter_count == 0
    assert report.ratio == 0.0


def test_latency_report_fields(micro_cfg):
    model = build_model(micro_cfg)
    scenes = [generate_scene(micro_cfg.world, s) for s in range(25)]
    rep = latency_report(model, scenes, use_lidar=False)
    assert rep["n_timed"] == 20
    assert rep["mean_ms"] > 0 and rep["p50_ms"] > 0 and rep["p95_ms"] >= rep["p50_ms"]
    with pytest.raises(ValueError):
        latency_report(model, scenes[:10], use_lidar=False)
