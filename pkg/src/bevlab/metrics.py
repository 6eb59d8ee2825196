"""Evaluation: center-distance mAP, parameter accounting and latency reports.

Matching follows the greedy score-ordered convention: predictions are taken
in descending score order and matched to the nearest unmatched ground-truth
box of the same class within a BEV center-distance threshold. AP is the area
under the precision-recall curve with all-point interpolation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Box3D

DEFAULT_THRESHOLDS = (0.25, 0.5, 1.0, 2.0)

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["thresholds", "class_names", "ap", "mean_ap", "counts", "n_gt", "n_pred"],
    "properties": {
        "thresholds": {"type": "array", "items": {"type": "number"}},
        "class_names": {"type": "array", "items": {"type": "string"}},
        "ap": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {"type": ["number", "null"]},
            },
        },
        "mean_ap": {"type": ["number", "null"]},
        "mean_translation_error": {"type": ["number", "null"]},
        "counts": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["tp", "fp", "fn"],
                "properties": {
                    "tp": {"type": "integer"},
                    "fp": {"type": "integer"},
                    "fn": {"type": "integer"},
                },
            },
        },
        "n_gt": {"type": "integer"},
        "n_pred": {"type": "integer"},
    },
}


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    class_names: tuple[str, ...]
    ap: dict  # class name -> {threshold string -> AP or None when no GT}
    mean_ap: float | None
    mean_translation_error: float | None
    counts: dict  # threshold string -> {tp, fp, fn}
    n_gt: int
    n_pred: int

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "class_names": list(self.class_names),
            "ap": self.ap,
            "mean_ap": self.mean_ap,
            "mean_translation_error": self.mean_translation_error,
            "counts": self.counts,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
        }


def _ap_from_flags(flags: list[bool], n_gt: int) -> float:
    """All-point interpolated AP from per-prediction TP flags in score order."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # integrate the right-to-left precision envelope over recall increments
    ap = 0.0
    best = 0.0
    prev_r = None
    for r, p in zip(recall[::-1], precision[::-1]):
        if prev_r is not None and r != prev_r:
            ap += (prev_r - r) * best
            prev_r = r
        elif prev_r is None:
            prev_r = r
        best = max(best, p)
    ap += prev_r * best if prev_r is not None else 0.0
    return float(ap)


def match_and_ap(
    preds_by_scene: list[list[tuple[Box3D, float]]],
    gts_by_scene: list[list[Box3D]],
    thresholds=DEFAULT_THRESHOLDS,
    class_names: tuple[str, ...] | None = None,
) -> EvalReport:
    """Greedy center-distance matching and AP over a set of scenes.

    Classes absent from the ground truth are reported as ``None`` and excluded
    from the mean. Ties in score break toward earlier scenes, then insertion
    order.
    """
    thresholds = tuple(thresholds)
    assert all(b > a for a, b in zip(thresholds, thresholds[1:])), "thresholds must ascend"
    n_scenes = len(gts_by_scene)
    assert len(preds_by_scene) == n_scenes

    class_ids = sorted(
        {b.class_id for gts in gts_by_scene for b in gts}
        | {b.class_id for preds in preds_by_scene for b, _ in preds}
    )
    if class_names is None:
        class_names = tuple(f"class_{k}" for k in (class_ids or [0]))
        name_of = {k: f"class_{k}" for k in class_ids}
    else:
        name_of = {k: class_names[k] for k in class_ids}

    ap: dict[str, dict[str, float | None]] = {name_of[k]: {} for k in class_ids}
    counts = {str(t): {"tp": 0, "fp": 0, "fn": 0} for t in thresholds}
    match_dists: list[float] = []
    largest = thresholds[-1] if thresholds else None

    n_gt_total = sum(len(g) for g in gts_by_scene)
    n_pred_total = sum(len(p) for p in preds_by_scene)

    per_thr_aps = []
    for thr in thresholds:
        thr_aps = []
        for k in class_ids:
            n_gt = sum(1 for gts in gts_by_scene for b in gts if b.class_id == k)
            rows = [
                (-score, si, pi, box)
                for si, preds in enumerate(preds_by_scene)
                for pi, (box, score) in enumerate(preds)
                if box.class_id == k
            ]
            rows.sort(key=lambda r: (r[0], r[1], r[2]))
            if n_gt == 0:
                ap[name_of[k]][str(thr)] = None
                counts[str(thr)]["fp"] += len(rows)
                continue
            matched = [set() for _ in range(n_scenes)]
            flags = []
            for _, si, _, box in rows:
                gts = gts_by_scene[si]
                best_j, best_d = -1, np.inf
                for j, gt in enumerate(gts):
                    if gt.class_id != k or j in matched[si]:
                        continue
                    d = float(np.hypot(box.center[0] - gt.center[0], box.center[1] - gt.center[1]))
                    if d < best_d:
                        best_j, best_d = j, d
                if best_j >= 0 and best_d <= thr:
                    matched[si].add(best_j)
                    flags.append(True)
                    if thr == largest:
                        match_dists.append(best_d)
                else:
                    flags.append(False)
            tp = sum(flags)
            counts[str(thr)]["tp"] += tp
            counts[str(thr)]["fp"] += len(flags) - tp
            counts[str(thr)]["fn"] += n_gt - tp
            value = _ap_from_flags(flags, n_gt)
            ap[name_of[k]][str(thr)] = value
            thr_aps.append(value)
        per_thr_aps.extend(thr_aps)

    mean_ap = float(np.mean(per_thr_aps)) if per_thr_aps else None
    mate = float(np.mean(match_dists)) if match_dists else None
    return EvalReport(
        thresholds=thresholds,
        class_names=tuple(class_names),
        ap=ap,
        mean_ap=mean_ap,
        mean_translation_error=mate,
        counts=counts,
        n_gt=n_gt_total,
        n_pred=n_pred_total,
    )


# ---------------------------------------------------------------------------
# Parameter and latency accounting


@dataclass
class ParamReport:
    base_count: int
    prompter_count: int
    ratio: float
    breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "base_count": self.base_count,
            "prompter_count": self.prompter_count,
            "ratio": self.ratio,
            "breakdown": self.breakdown,
        }


def param_report(model) -> ParamReport:
    """Exact parameter counts over the model's base/prompter partition."""
    base = sum(p.numel() for _, p in model.base_named_parameters())
    prompter = sum(p.numel() for _, p in model.prompter_named_parameters())
    breakdown: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        breakdown[top] = breakdown.get(top, 0) + p.numel()
        if name.startswith("fusion.bev_reduce."):
            # the learned vertical reducer, costed separately
            breakdown["fusion.bev_reduce"] = breakdown.get("fusion.bev_reduce", 0) + p.numel()
    return ParamReport(
        base_count=base,
        prompter_count=prompter,
        ratio=prompter / base if base else 0.0,
        breakdown=breakdown,
    )


def latency_report(model, scenes, use_lidar: bool, warmup: int = 5) -> dict:
    """Wall-clock per-scene inference statistics after warm-up runs."""
    if len(scenes) < warmup + 20:
        raise ValueError(f"need at least {warmup + 20} scenes ({warmup} warm-ups + 20 timed)")
    with torch.no_grad():
        for scene in scenes[:warmup]:
            model.predict(scene, use_lidar=use_lidar)
        times = []
        for scene in scenes[warmup:]:
            t0 = time.perf_counter()
            model.predict(scene, use_lidar=use_lidar)
            times.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(times)
    return {
        "mean_ms": float(arr.mean()),
        "p50_ms": float(np.percentile(arr, 50)),
        "p95_ms": float(np.percentile(arr, 95)),
        "n_timed": len(times),
        "mode": "fused" if use_lidar else "camera",
    }


def evaluate_model(model, scenes, thresholds=DEFAULT_THRESHOLDS, use_lidar=False,
                   score_thresh=0.05, max_dets=16, class_names=None) -> EvalReport:
    preds = [model.predict(s, use_lidar=use_lidar, score_thresh=score_thresh, max_dets=max_dets)
             for s in scenes]
    gts = [list(s.boxes) for s in scenes]
    return match_and_ap(preds, gts, thresholds, class_names=class_names)
