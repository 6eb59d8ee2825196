"""Feature-map dumps, BEV box plots and training-curve figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image, ImageDraw

from .geometry import bev_corners
from .model import SceneBatch

UPSCALE = 12

GT_COLOR = "red"
PRED_COLOR = "lime"
GT_RGB = (255, 0, 0)


def encoder_feature_mean(model, scene, use_lidar: bool) -> np.ndarray:
    """Channel-mean of the BEV encoder output for one scene, as (Hb, Wb) float."""
    with torch.no_grad():
        batch = SceneBatch.from_scenes([scene])
        cam_pyr = model.camera_pyramid(batch)
        bev = model.fused_bev(batch, cam_pyr) if use_lidar else model.camera_bev(cam_pyr)
        enc = model.encoder(bev)
        return enc[0].mean(dim=0).cpu().numpy()


def _world_to_cell(xy, grid):
    cw, ch = grid.bev_cell
    ox, oy, _ = grid.origin
    return (np.asarray(xy)[..., 0] - ox) / cw - 0.5, (np.asarray(xy)[..., 1] - oy) / ch - 0.5


def feature_map_image(feat: np.ndarray, boxes, grid, upscale: int = UPSCALE) -> Image.Image:
    """Channel-mean feature as an image of exactly (Hb*upscale, Wb*upscale)
    pixels, nearest-upscaled, with GT footprints outlined in red."""
    lo, hi = float(feat.min()), float(feat.max())
    norm = (feat - lo) / (hi - lo) if hi > lo else np.zeros_like(feat)
    gray = np.clip(np.rint(norm * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(gray, mode="L").convert("RGB")
    img = img.resize((feat.shape[1] * upscale, feat.shape[0] * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for box in boxes:
        u, v = _world_to_cell(bev_corners(box), grid)
        px = [((uu + 0.5) * upscale, (vv + 0.5) * upscale) for uu, vv in zip(u, v)]
        draw.polygon(px, outline=GT_RGB)
    return img


def save_feature_map(feat: np.ndarray, boxes, grid, path) -> None:
    feature_map_image(feat, boxes, grid).save(path)


def dump_feature_maps(model, scene, out_dir) -> list[Path]:
    """Write channel-mean encoder maps for the available inference paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    modes = [("camera", False)]
    if model.has_prompter:
        modes.append(("fused", True))
    for name, use_lidar in modes:
        feat = encoder_feature_mean(model, scene, use_lidar)
        path = out / f"feat_{name}_scene{scene.scene_id:06d}.png"
        save_feature_map(feat, scene.boxes, model.grid, path)
        written.append(path)
    return written


def save_bev_plot(scene, preds, xy_range, path, title="") -> None:
    """Top view: LiDAR points, GT boxes in red, predictions in green."""
    fig, ax = plt.subplots(figsize=(6, 6))
    pts = scene.points
    ax.scatter(pts[:, 0], pts[:, 1], s=0.4, c="0.6", linewidths=0)
    for box in scene.boxes:
        c = np.asarray(bev_corners(box))
        ax.plot(np.append(c[:, 0], c[0, 0]), np.append(c[:, 1], c[0, 1]), color=GT_COLOR, lw=1.2)
    for box, score in preds:
        c = np.asarray(bev_corners(box))
        ax.plot(np.append(c[:, 0], c[0, 0]), np.append(c[:, 1], c[0, 1]), color=PRED_COLOR, lw=1.0)
        ax.annotate(f"{score:.2f}", box.center[:2], fontsize=6, color=PRED_COLOR)
    ax.set_xlim(*xy_range)
    ax.set_ylim(*xy_range)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_views_strip(scene, path) -> None:
    """All camera views of a scene side by side as one PNG."""
    imgs = [np.clip(np.rint(v.image * 255.0), 0, 255).astype(np.uint8) for v in scene.views]
    strip = np.concatenate(imgs, axis=1)
    Image.fromarray(strip).save(path)


def plot_training_curves(records: list[dict], out_dir) -> list[Path]:
    """Loss-component curves and the fusion/camera BEV distance curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if not records:
        return written
    epochs = [r["epoch"] for r in records]

    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("loss", "det_fusion", "det_camera", "fea", "rel", "resp"):
        if key in records[0]:
            ax.plot(epochs, [r.get(key, np.nan) for r in records], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    loss_path = out / "loss_curves.png"
    fig.savefig(loss_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(loss_path)

    if any("f_dist" in r for r in records):
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(epochs, [r.get("f_dist", np.nan) for r in records], color="tab:purple")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean BEV feature L2 distance (fusion vs camera)")
        dist_path = out / "feature_distance.png"
        fig.savefig(dist_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(dist_path)
    return written
