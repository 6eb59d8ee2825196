"""Command-line entry points: dataset synthesis, training, evaluation, visualization.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import subprocess
import sys
import traceback
from pathlib import Path

from . import __version__
from .config import LAMBDA_PROFILES, DistillWeights, config_to_dict, load_config
from .errors import BevLabError, ConfigError, ModeError
from .metrics import (
    DEFAULT_THRESHOLDS,
    evaluate_model,
    latency_report,
    param_report,
)
from .scenes import build_dataset, load_manifest, load_scene, load_split, scene_dir, world_from_manifest
from .train import apply_determinism_env, fit, load_checkpoint, read_training_log
from . import viz

RUN_MANIFEST_NAME = "run_manifest.json"


def code_version() -> str:
    """git-describe style version of the running code, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except Exception:
        pass
    return f"v{__version__}"


def write_run_manifest(out_dir, command: str, settings: dict, outputs: list[str]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "settings": settings,
        "code_version": code_version(),
        "created": datetime.datetime.now().isoformat(timespec="seconds"),
        "outputs": outputs,
    }
    path = out / RUN_MANIFEST_NAME
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cfg, data = load_config(args.config)
    n_scenes = args.n_scenes if args.n_scenes is not None else data.n_scenes
    seed = args.seed if args.seed is not None else data.seed
    manifest = build_dataset(
        cfg.world, n_scenes, seed, args.out,
        train_fraction=data.train_fraction, force=args.force,
    )
    write_run_manifest(
        args.out,
        "synth",
        {"config": config_to_dict(cfg), "n_scenes": n_scenes, "seed": seed},
        [str(Path(args.out) / "manifest.json")],
    )
    print(Path(args.out) / "manifest.json")
    print(f"wrote {n_scenes} scenes ({len(manifest['train_ids'])} train / "
          f"{len(manifest['val_ids'])} val)")
    return 0


def _apply_train_overrides(cfg, args) -> None:
    if args.mode is not None:
        cfg.mode = args.mode
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.no_augment:
        cfg.augment = False

    lam_flags = {
        "fea": args.lambda1, "rel": args.lambda2, "resp": args.lambda3,
    }
    explicit = {k: v for k, v in lam_flags.items() if v is not None}
    if args.lambda_profile is not None:
        cfg.weights = DistillWeights(*LAMBDA_PROFILES[args.lambda_profile])
    if explicit:
        cfg.weights = dataclasses.replace(cfg.weights, **explicit)

    if cfg.mode != "prompted":
        given_positive = [k for k, v in explicit.items() if v > 0]
        if given_positive or (args.lambda_profile is not None):
            raise ConfigError(
                f"mode {cfg.mode!r} disables the distillation losses; "
                "lambda flags contradict it"
            )
        if args.no_detach:
            raise ConfigError("--no-detach requires --mode prompted")
    if args.no_detach:
        cfg.detach_fusion = False
    cfg.validate()


def cmd_train(args) -> int:
    cfg, _ = load_config(args.config)
    _apply_train_overrides(cfg, args)
    manifest = load_manifest(args.data)
    if world_from_manifest(manifest) != cfg.world:
        raise ConfigError("config world does not match dataset manifest")

    checkpoint = fit(cfg, args.data, args.out, resume=not args.fresh)
    records = read_training_log(args.out)
    plots = viz.plot_training_curves(records, args.out)
    write_run_manifest(
        args.out,
        "train",
        {
            "config": config_to_dict(cfg),
            "mode": cfg.mode,
            "detach_fusion": cfg.detach_fusion,
            "lambdas": list(cfg.weights.as_tuple()),
            "seed": cfg.seed,
            "data": str(args.data),
        },
        [str(checkpoint)] + [str(p) for p in plots],
    )
    print(checkpoint)
    return 0


def cmd_eval(args) -> int:
    cfg, model, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    if world_from_manifest(manifest) != cfg.world:
        raise ConfigError("checkpoint world/grid does not match dataset manifest")
    scenes = load_split(args.data, "val")
    if not scenes:
        raise ConfigError("no scenes in the val split")

    thresholds = tuple(float(t) for t in args.thresholds.split(",")) if args.thresholds \
        else DEFAULT_THRESHOLDS
    mode_name = "fused" if args.use_lidar else "camera"
    report = evaluate_model(
        model, scenes,
        thresholds=thresholds,
        use_lidar=args.use_lidar,
        score_thresh=args.score_thresh if args.score_thresh is not None else cfg.score_thresh,
        max_dets=cfg.max_dets,
        class_names=cfg.world.class_names,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"eval_report_{mode_name}.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)

    params_path = out / "param_report.json"
    with open(params_path, "w") as fh:
        json.dump(param_report(model).to_dict(), fh, indent=1)

    outputs = [str(report_path), str(params_path)]
    if not args.skip_latency and len(scenes) >= 25:
        lat = latency_report(model, scenes, use_lidar=args.use_lidar)
        lat_path = out / f"latency_report_{mode_name}.json"
        with open(lat_path, "w") as fh:
            json.dump(lat, fh, indent=1)
        outputs.append(str(lat_path))

    write_run_manifest(
        out, "eval",
        {"checkpoint": str(args.checkpoint), "use_lidar": args.use_lidar,
         "thresholds": list(thresholds)},
        outputs,
    )
    map_str = "n/a" if report.mean_ap is None else f"{report.mean_ap:.4f}"
    print(f"{mode_name} mAP: {map_str} ({report_path})")
    return 0


def cmd_viz(args) -> int:
    cfg, model, _, _ = load_checkpoint(args.checkpoint)
    sdir = scene_dir(args.data, args.scene_id)
    if not sdir.exists():
        raise ConfigError(f"unknown scene id {args.scene_id}")
    scene = load_scene(sdir, args.scene_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    written = []
    modes = [("camera", False)] + ([("fused", True)] if model.has_prompter else [])
    for name, use_lidar in modes:
        preds = model.predict(scene, use_lidar=use_lidar, score_thresh=cfg.score_thresh,
                              max_dets=cfg.max_dets)
        path = out / f"bev_{name}_scene{args.scene_id:06d}.png"
        viz.save_bev_plot(scene, preds, cfg.world.xy_range, path,
                          title=f"scene {args.scene_id} [{name}]")
        written.append(path)
    written.extend(viz.dump_feature_maps(model, scene, out))
    strip = out / f"views_scene{args.scene_id:06d}.png"
    viz.save_views_strip(scene, strip)
    written.append(strip)

    write_run_manifest(out, "viz", {"checkpoint": str(args.checkpoint),
                                    "scene_id": args.scene_id},
                       [str(p) for p in written])
    for p in written:
        print(p)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevlab",
        description="Desk-scale BEV 3D detection lab with a LiDAR prompter",
    )
    parser.add_argument("--version", action="version", version=code_version())
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty out dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("prompted", "fusion_only", "camera_baseline"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-detach", action="store_true",
                   help="do not detach fusion features in the distillation losses")
    p.add_argument("--lambda1", type=float, default=None, help="feature-distill weight")
    p.add_argument("--lambda2", type=float, default=None, help="relation-distill weight")
    p.add_argument("--lambda3", type=float, default=None, help="response-distill weight")
    p.add_argument("--lambda-profile", choices=sorted(LAMBDA_PROFILES), default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use-lidar", action="store_true", help="evaluate the fusion path")
    p.add_argument("--score-thresh", type=float, default=None)
    p.add_argument("--thresholds", default=None, help="comma-separated meters")
    p.add_argument("--skip-latency", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render predictions and feature maps for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    apply_determinism_env()
    try:
        return args.func(args)
    except (ConfigError, ModeError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BevLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
