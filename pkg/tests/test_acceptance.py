"""Acceptance gate: end-to-end trend checks on the default toy benchmark plus
the exactness, gradient, invariance and oracle criteria.

The benchmark (criteria 1-4) trains four variants x three seeds on a
200-train / 50-val scene dataset for 20 epochs each; on a modern 8-core CPU
the fusion-uplift benchmark part finishes well inside 45 minutes. Set
BEVLAB_ACCEPTANCE_DIR to a writable path to cache datasets, runs and
evaluations across invocations.

One "[criterion NN] ... PASS/FAIL" line is printed per criterion (run pytest
with -s to stream them).
"""

import dataclasses
import json
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from bevlab.config import DistillWeights, GridSpec, TrainConfig
from bevlab.detector import BEVEncoder, CenterHead, ResponseMap
from bevlab.distill import (
    ImitationModule,
    combined_distill_loss,
    feature_distill,
    relation_distill,
    response_distill,
)
from bevlab.fusion import HierarchicalGatedFusion
from bevlab.geometry import Box3D
from bevlab.metrics import evaluate_model, latency_report, match_and_ap, param_report
from bevlab.model import SceneBatch, build_model
from bevlab.scenes import generate_scene, build_dataset, load_split, render_views
from bevlab.train import fit, load_checkpoint, read_training_log
from conftest import rand_level
from fdcheck import directional_grad_check, module_grad_check
from oracles import (
    aggregate_ref,
    ap_per_class_ref,
    fea_distill_ref,
    fuse_scale_ref,
    imitation_ref,
    rel_distill_ref,
    resp_distill_ref,
)

SEEDS = (0, 1, 2)
VARIANTS = ("prompted", "baseline", "nodetach", "lam0")


def _report(num, name, ok, detail):
    print(f"\n[criterion {num:2d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} ({name}): {detail}"


def _config(variant: str, seed: int) -> TrainConfig:
    cfg = TrainConfig()
    cfg.seed = seed
    if variant == "baseline":
        cfg.mode = "camera_baseline"
    elif variant == "nodetach":
        cfg.detach_fusion = False
    elif variant == "lam0":
        cfg.weights = DistillWeights(0.0, 0.0, 0.0)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory) -> Path:
    override = os.environ.get("BEVLAB_ACCEPTANCE_DIR")
    if override:
        path = Path(override)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset(bench_dir) -> Path:
    data = bench_dir / "data"
    if not (data / "manifest.json").exists():
        t0 = time.time()
        build_dataset(TrainConfig().world, 250, 0, data, train_fraction=0.8, force=True)
        print(f"\n[acceptance] dataset built in {time.time() - t0:.0f}s")
    return data


@pytest.fixture(scope="session")
def runs(bench_dir, dataset) -> dict:
    """Train (or reuse) all benchmark runs; returns {(variant, seed): out_dir}."""
    out = {}
    for variant in VARIANTS:
        for seed in SEEDS:
            run_dir = bench_dir / "runs" / f"{variant}_s{seed}"
            if not (run_dir / "final.npz").exists():
                t0 = time.time()
                fit(_config(variant, seed), dataset, run_dir)
                print(f"\n[acceptance] trained {variant} seed {seed} "
                      f"in {(time.time() - t0) / 60:.1f} min")
            out[(variant, seed)] = run_dir
    return out


@pytest.fixture(scope="session")
def val_scenes(dataset):
    return load_split(dataset, "val")


@pytest.fixture(scope="session")
def maps(bench_dir, runs, val_scenes) -> dict:
    """mAP per (variant, seed, inference mode), cached on disk."""
    cache_path = bench_dir / "maps.json"
    cache = json.loads(cache_path.read_text()) if cache_path.exists() else {}
    needed = []
    for seed in SEEDS:
        needed += [("prompted", seed, "fused"), ("prompted", seed, "camera"),
                   ("baseline", seed, "camera"), ("nodetach", seed, "fused")]
    for variant, seed, mode in needed:
        key = f"{variant}_s{seed}_{mode}"
        if key in cache:
            continue
        cfg, model, _, _ = load_checkpoint(runs[(variant, seed)] / "final.npz")
        report = evaluate_model(
            model, val_scenes, use_lidar=(mode == "fused"),
            score_thresh=cfg.score_thresh, max_dets=cfg.max_dets,
            class_names=cfg.world.class_names,
        )
        cache[key] = report.mean_ap
        cache_path.write_text(json.dumps(cache, indent=1))
        print(f"\n[acceptance] {key} mAP = {report.mean_ap:.4f}")
    return cache


# ---------------------------------------------------------------------------
# Criteria 1-4: benchmark trends


def test_criterion_1_fusion_uplift(maps):
    fused = [maps[f"prompted_s{s}_fused"] for s in SEEDS]
    base = [maps[f"baseline_s{s}_camera"] for s in SEEDS]
    delta = float(np.mean(fused)) - float(np.mean(base))
    _report(1, "fusion uplift >= 10 points",
            delta >= 0.10,
            f"fused mean {np.mean(fused):.4f} vs baseline mean {np.mean(base):.4f}, "
            f"delta {delta:+.4f}")


def test_criterion_2_camera_only_uplift(maps):
    deltas = [maps[f"prompted_s{s}_camera"] - maps[f"baseline_s{s}_camera"] for s in SEEDS]
    med = statistics.median(deltas)
    _report(2, "camera-only uplift median > 0", med > 0.0,
            f"per-seed deltas {[f'{d:+.4f}' for d in deltas]}, median {med:+.4f}")


def test_criterion_3_detach_ablation(maps):
    detached = statistics.median([maps[f"prompted_s{s}_fused"] for s in SEEDS])
    nodetach = statistics.median([maps[f"nodetach_s{s}_fused"] for s in SEEDS])
    _report(3, "no-detach fused mAP <= detached", nodetach <= detached + 1e-12,
            f"no-detach median {nodetach:.4f} vs detached median {detached:.4f}")


def test_criterion_4_feature_distance_trend(runs):
    details = []
    ok = True
    for seed in SEEDS:
        with_cmki = read_training_log(runs[("prompted", seed)])[-1]["f_dist"]
        without = read_training_log(runs[("lam0", seed)])[-1]["f_dist"]
        details.append(f"seed {seed}: {with_cmki:.4f} vs {without:.4f}")
        ok = ok and with_cmki < without
    _report(4, "final fusion/camera feature distance lower with distillation",
            ok, "; ".join(details))


# ---------------------------------------------------------------------------
# Criterion 5: parameter overhead


def test_criterion_5_parameter_overhead():
    model = build_model(TrainConfig())
    rep = param_report(model)
    _report(5, "prompter/base parameter ratio < 0.05", rep.ratio < 0.05,
            f"prompter {rep.prompter_count} / base {rep.base_count} = {rep.ratio:.4f}")


# ---------------------------------------------------------------------------
# Criterion 6: loop-oracle equivalence on random 4x4x4 instances


def test_criterion_6_oracle_equivalence(unit_grid):
    rng = np.random.default_rng(0)
    worst = 0.0

    fusion = HierarchicalGatedFusion(unit_grid).double()
    g = torch.Generator().manual_seed(1)
    for gate in (*fusion.scale_gates, fusion.level_gate):
        gate.weight.data = torch.randn(gate.weight.shape, generator=g, dtype=torch.float64)
        gate.bias.data = torch.randn(gate.bias.shape, generator=g, dtype=torch.float64)
    p = lambda c: (c.weight.detach().numpy(), c.bias.detach().numpy())

    f_l = rand_level(unit_grid, 0, rng=rng)
    f_c = rand_level(unit_grid, 0, rng=rng)
    got = fusion.fuse_scale(f_l, f_c, 0)[0].detach().numpy()
    ref = fuse_scale_ref(f_l[0].numpy(), f_c[0].numpy(), p(fusion.lidar_convs[0]),
                         p(fusion.camera_convs[0]), p(fusion.scale_gates[0]))
    worst = max(worst, float(np.abs(got - ref).max()))

    levels = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
    got = fusion.aggregate(*levels)[0].detach().numpy()
    ref = aggregate_ref(*[l[0].numpy() for l in levels],
                        [p(c) for c in fusion.level_convs], p(fusion.level_gate),
                        p(fusion.bev_reduce))
    worst = max(worst, float(np.abs(got - ref).max()))

    imi = ImitationModule(unit_grid).double()
    x = rand_level(unit_grid, 1, rng=rng)
    got = imi(x)[0].detach().numpy()
    ref = imitation_ref(x[0].numpy(), p(imi.conv3d), p(imi.conv2d))
    worst = max(worst, float(np.abs(got - ref).max()))

    boxes = [Box3D((0.4, -0.7, 0.5), (2.0, 1.2, 1.0), 0.2, 0),
             Box3D((-0.8, 0.9, 0.5), (1.5, 1.0, 1.0), -0.9, 1)]
    bev = lambda seed: torch.from_numpy(
        np.random.default_rng(seed).standard_normal((1, unit_grid.channels, *unit_grid.bev_shape)))
    a, b = bev(1), bev(2)
    worst = max(worst, abs(float(feature_distill(a, b, [boxes], unit_grid))
                           - fea_distill_ref(a[0].numpy(), b[0].numpy(), boxes, unit_grid)))
    worst = max(worst, abs(float(relation_distill(a, b, [boxes], unit_grid))
                           - rel_distill_ref(a[0].numpy(), b[0].numpy(), boxes, unit_grid)))
    hb, wb = unit_grid.bev_shape
    rr = np.random.default_rng(3)
    resp_a = ResponseMap(torch.from_numpy(rr.uniform(0.01, 0.99, (1, 2, hb, wb))),
                         torch.from_numpy(rr.standard_normal((1, 6, hb, wb))))
    resp_b = ResponseMap(torch.from_numpy(rr.uniform(0.01, 0.99, (1, 2, hb, wb))),
                         torch.from_numpy(rr.standard_normal((1, 6, hb, wb))))
    worst = max(worst, abs(float(response_distill(resp_a, resp_b, [boxes], unit_grid))
                           - resp_distill_ref(resp_a.heatmaps[0].numpy(), resp_b.heatmaps[0].numpy(),
                                              resp_a.regression[0].numpy(),
                                              resp_b.regression[0].numpy(), boxes, unit_grid)))

    _report(6, "loop-oracle equivalence < 1e-6", worst < 1e-6, f"max abs diff {worst:.3g}")


# ---------------------------------------------------------------------------
# Criterion 7: finite-difference gradient suite


def test_criterion_7_gradient_suite(unit_grid, micro_cfg):
    rng = np.random.default_rng(0)

    fusion = HierarchicalGatedFusion(unit_grid).double()
    f_l = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
    f_c = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
    proj = torch.from_numpy(rng.standard_normal((1, unit_grid.channels, *unit_grid.bev_shape)))
    module_grad_check(
        fusion,
        lambda: (fusion.aggregate(*[fusion.fuse_scale(f_l[i], f_c[i], i) for i in range(3)])
                 * proj).sum(),
    )

    imi = ImitationModule(unit_grid).double()
    x1 = rand_level(unit_grid, 1, rng=rng)
    module_grad_check(imi, lambda: (imi(x1) * proj).sum())

    enc = BEVEncoder(unit_grid.channels, 8, 1).double()
    head = CenterHead(8, 2).double()
    bev_in = rand_level(unit_grid, 1, rng=rng)[:, :, 0]
    hb, wb = bev_in.shape[-2:]
    ph = torch.from_numpy(rng.standard_normal((1, 2, hb, wb)))
    pr = torch.from_numpy(rng.standard_normal((1, 6, hb, wb)))

    def det_loss():
        resp = head(enc(bev_in))
        return (resp.heatmaps * ph).sum() + (resp.regression * pr).sum()

    module_grad_check(enc, det_loss)
    module_grad_check(head, det_loss)

    # every loss term w.r.t. camera-branch parameters, fusion side frozen
    micro_cfg.seed = 1
    model = build_model(micro_cfg).double()
    scene = generate_scene(micro_cfg.world, 2)
    batch = SceneBatch.from_scenes([scene], dtype=torch.float64)
    with torch.no_grad():
        pyr0 = model.camera_pyramid(batch)
        f_f0 = model.fused_bev(batch, pyr0)
        enc_f0 = model.encoder(f_f0)
        resp_f0 = model.head(enc_f0)
    camera_params = [p for _, p in model.base_named_parameters()]

    from bevlab.detector import detection_loss

    def camera_side():
        pyr = model.camera_pyramid(batch)
        f_c_ = model.camera_bev(pyr)
        enc_c_ = model.encoder(f_c_)
        return f_c_, enc_c_, model.head(enc_c_)

    term_fns = {
        "det_camera": lambda: detection_loss(camera_side()[2], batch.boxes, model.grid),
        "fea": lambda: feature_distill(f_f0, camera_side()[0], batch.boxes, model.grid),
        "rel": lambda: relation_distill(enc_f0, camera_side()[1], batch.boxes, model.grid),
        "resp": lambda: response_distill(resp_f0, camera_side()[2], batch.boxes, model.grid),
    }
    for name, fn in term_fns.items():
        directional_grad_check(fn, camera_params, n_dirs=2, seed=hash(name) % 1000)

    # distillation gradients w.r.t. prompter parameters vanish exactly under detach
    def full_distill():
        pyr = model.camera_pyramid(batch)
        f_f = model.fused_bev(batch, pyr)
        f_c = model.camera_bev(pyr)
        enc_f, enc_c = model.encoder(f_f), model.encoder(f_c)
        total, _ = combined_distill_loss(f_f, f_c, enc_f, enc_c, model.head(enc_f),
                                         model.head(enc_c), batch.boxes, model.grid,
                                         DistillWeights(), detach_fusion=True)
        return total

    prompter = [p for _, p in model.prompter_named_parameters()]
    grads = torch.autograd.grad(full_distill(), prompter, allow_unused=True)
    detach_ok = all(g is None or torch.count_nonzero(g) == 0 for g in grads)

    _report(7, "finite-difference gradient suite", detach_ok,
            "all terms within 1e-4 rel; prompter gradients exactly zero under detach")


# ---------------------------------------------------------------------------
# Criterion 8: modality-switch invariance


def test_criterion_8_modality_switch_invariance(runs, val_scenes):
    _, model, _, _ = load_checkpoint(runs[("prompted", 0)] / "final.npz")
    scene = val_scenes[0]
    base_preds = model.predict(scene, use_lidar=False)
    rng = np.random.default_rng(0)
    ok = True
    saved = scene.points
    for trial in range(3):
        scene.points = rng.uniform(-15, 15, size=(int(rng.integers(1, 5000)), 4)).astype(np.float32)
        ok = ok and (model.predict(scene, use_lidar=False) == base_preds)
    scene.points = saved
    _report(8, "camera-only predictions ignore the point cloud", ok,
            f"{len(base_preds)} detections bit-identical across 3 random clouds")


# ---------------------------------------------------------------------------
# Criterion 9: gate normalization


def test_criterion_9_gate_normalization(unit_grid):
    fusion = HierarchicalGatedFusion(unit_grid).double()
    g = torch.Generator().manual_seed(2)
    for gate in (*fusion.scale_gates, fusion.level_gate):
        gate.weight.data = torch.randn(gate.weight.shape, generator=g, dtype=torch.float64)
        gate.bias.data = torch.randn(gate.bias.shape, generator=g, dtype=torch.float64)
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(5):
        f_l = rand_level(unit_grid, 0, rng=rng)
        f_c = rand_level(unit_grid, 0, rng=rng)
        mixed = torch.cat([fusion.lidar_convs[0](f_l), fusion.camera_convs[0](f_c)], dim=1)
        w2 = torch.softmax(fusion.scale_gates[0](mixed), dim=1)
        worst = max(worst, float((w2.sum(dim=1) - 1).abs().max()))
        levels = [rand_level(unit_grid, i, rng=rng) for i in range(3)]
        target = levels[1].shape[-3:]
        import torch.nn.functional as F

        f0r = F.interpolate(levels[0], size=target, mode="trilinear", align_corners=False)
        f2r = F.interpolate(levels[2], size=target, mode="trilinear", align_corners=False)
        stacked = torch.cat([fusion.level_convs[0](f0r), fusion.level_convs[1](levels[1]),
                             fusion.level_convs[2](f2r)], dim=1)
        w3 = torch.softmax(fusion.level_gate(stacked), dim=1)
        worst = max(worst, float((w3.sum(dim=1) - 1).abs().max()))
    _report(9, "softmax gate channels sum to 1", worst < 1e-6, f"max |sum-1| = {worst:.3g}")


# ---------------------------------------------------------------------------
# Criterion 10: evaluation oracle


def test_criterion_10_eval_matches_bruteforce():
    rng = np.random.default_rng(10)
    mismatches = 0
    for case in range(50):
        gts, preds = [], []
        for _ in range(int(rng.integers(1, 3))):
            gts.append([Box3D((float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)), 0.8),
                              (4.0, 2.0, 1.6), 0.0, int(rng.integers(2)))
                        for _ in range(int(rng.integers(0, 4)))])
            preds.append([(Box3D((float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)), 0.8),
                                 (4.0, 2.0, 1.6), 0.0, int(rng.integers(2))),
                           float(rng.uniform(0, 1)))
                          for _ in range(int(rng.integers(0, 5)))])
        thresholds = (0.5, 1.0, 2.0)
        report = match_and_ap(preds, gts, thresholds=thresholds)
        for cls in (0, 1):
            for thr in thresholds:
                ref = ap_per_class_ref(preds, gts, thr, cls)
                got = report.ap.get(f"class_{cls}", {}).get(str(thr))
                if ref is None:
                    if got is not None:
                        mismatches += 1
                elif got is None or abs(got - ref) > 1e-12:
                    mismatches += 1
    _report(10, "greedy matching equals brute-force oracle (50 cases)", mismatches == 0,
            f"{mismatches} mismatching (case, class, threshold) triples")


# ---------------------------------------------------------------------------
# Criterion 11: latency character


def test_criterion_11_latency(runs, val_scenes):
    torch.set_num_threads(max(1, torch.get_num_threads()))
    scenes = val_scenes[:30]
    _, prompted, _, _ = load_checkpoint(runs[("prompted", 0)] / "final.npz")
    _, baseline, _, _ = load_checkpoint(runs[("baseline", 0)] / "final.npz")
    cam = latency_report(prompted, scenes, use_lidar=False)
    fused = latency_report(prompted, scenes, use_lidar=True)
    base = latency_report(baseline, scenes, use_lidar=False)
    within = abs(cam["mean_ms"] - base["mean_ms"]) / base["mean_ms"]
    ok = within <= 0.10 and fused["mean_ms"] > cam["mean_ms"]
    _report(11, "camera-mode latency within 10% of baseline; fused costs more", ok,
            f"camera {cam['mean_ms']:.1f} ms vs baseline {base['mean_ms']:.1f} ms "
            f"({within * 100:.1f}%); fused {fused['mean_ms']:.1f} ms")


# ---------------------------------------------------------------------------
# Trained-model behavior checks that need the benchmark runs


def test_detection_loss_decreases_over_training(runs):
    details = []
    ok = True
    for seed in SEEDS:
        log = read_training_log(runs[("prompted", seed)])
        first = log[0]["det_fusion"] + log[0]["det_camera"]
        last = log[-1]["det_fusion"] + log[-1]["det_camera"]
        details.append(f"seed {seed}: {first:.2f} -> {last:.2f}")
        ok = ok and last < first
    print(f"\n[acceptance] detection loss over 20 epochs: {'; '.join(details)}")
    assert ok


def test_lidar_mode_detects_an_object_invisible_to_the_cameras(runs, dataset):
    """A box present in the points but absent from the images is found only in
    fused mode."""
    cfg, model, _, _ = load_checkpoint(runs[("prompted", 0)] / "final.npz")
    scene = None
    for seed in range(200, 260):
        cand = generate_scene(cfg.world, seed)
        big = [b for b in cand.boxes if b.size[0] > 5.0]
        if big:
            scene = cand
            target = max(big, key=lambda b: b.size[0])
            break
    assert scene is not None
    visible = [b for b in scene.boxes if b is not target]
    scene.views = render_views(cfg.world, visible)  # images no longer show the target

    def hit(preds):
        return any(
            np.hypot(b.center[0] - target.center[0], b.center[1] - target.center[1]) <= 2.0
            and b.class_id == target.class_id
            for b, _ in preds
        )

    fused_found = hit(model.predict(scene, use_lidar=True, score_thresh=cfg.score_thresh))
    camera_found = hit(model.predict(scene, use_lidar=False, score_thresh=cfg.score_thresh))
    print(f"\n[acceptance] hidden-object check: fused={fused_found} camera={camera_found}")
    assert fused_found and not camera_found


def test_fused_feature_maps_highlight_objects(runs, val_scenes):
    """Channel-mean encoder output is brighter at GT centers than the scene median."""
    from bevlab.viz import encoder_feature_mean
    from bevlab.detector import center_cell

    _, model, _, _ = load_checkpoint(runs[("prompted", 0)] / "final.npz")
    brighter = total = 0
    for scene in val_scenes[:8]:
        if not scene.boxes:
            continue
        feat = encoder_feature_mean(model, scene, use_lidar=True)
        med = float(np.median(feat))
        for box in scene.boxes:
            row, col = center_cell(box, model.grid)
            total += 1
            if feat[row, col] > med:
                brighter += 1
    print(f"\n[acceptance] {brighter}/{total} GT centers brighter than scene median")
    assert total > 0 and brighter / total >= 0.8
