"""Synthetic scene generation and the on-disk dataset format.

A scene is ground-truth boxes + a simulated LiDAR point cloud + rendered
surround-camera views. Generation is a pure function of (WorldSpec, seed), so
scenes are reproducible bit-for-bit and may be generated in parallel.
"""

from __future__ import annotations

import json
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import WorldSpec
from .errors import ConfigError
from . import geometry
from .geometry import Box3D

MANIFEST_NAME = "manifest.json"
_PLACEMENT_ATTEMPTS = 60


@dataclass
class CameraView:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    intrinsics: np.ndarray  # (3, 3) float64
    cam_to_world: np.ndarray  # (4, 4) float64, rigid


@dataclass
class Scene:
    scene_id: int
    boxes: list[Box3D]
    points: np.ndarray  # (N, 4) float32: x, y, z, intensity
    views: list[CameraView]


def generate_scene(spec: WorldSpec, seed: int) -> Scene:
    """Generate one scene deterministically from (spec, seed)."""
    spec.validate()
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    boxes = _place_boxes(spec, rng)
    points = _sample_lidar(spec, boxes, rng)
    views = render_views(spec, boxes)
    return Scene(scene_id=int(seed), boxes=boxes, points=points, views=views)


def _place_boxes(spec: WorldSpec, rng) -> list[Box3D]:
    lo, hi = spec.n_boxes_range
    target = int(rng.integers(lo, hi + 1))
    boxes: list[Box3D] = []
    xmin, xmax = spec.xy_range
    for _ in range(target):
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            k = int(rng.integers(spec.n_classes))
            base = np.asarray(spec.class_sizes[k])
            size = base * (1.0 + spec.size_jitter * rng.uniform(-1.0, 1.0, size=3))
            l, w, h = (float(v) for v in size)
            hx, hy = l / 2.0, w / 2.0
            if xmin + hx >= xmax - hx or xmin + hy >= xmax - hy:
                continue
            cx = float(rng.uniform(xmin + hx, xmax - hx))
            cy = float(rng.uniform(xmin + hy, xmax - hy))
            cand = Box3D(center=(cx, cy, h / 2.0), size=(l, w, h), yaw=0.0, class_id=k)
            if geometry.bev_point_rect_distance((0.0, 0.0), cand) < spec.ego_clearance:
                continue
            ok = True
            for other in boxes:
                if np.hypot(cx - other.center[0], cy - other.center[1]) < spec.min_center_sep:
                    ok = False
                    break
                if geometry.bev_rects_overlap(cand, other, margin=spec.footprint_margin / 2.0):
                    ok = False
                    break
            if ok:
                boxes.append(cand)
                break
    return boxes


def _sample_lidar(spec: WorldSpec, boxes: list[Box3D], rng) -> np.ndarray:
    n_total = spec.points_per_scene
    n_ground = n_total if not boxes else int(round(n_total * spec.ground_point_fraction))
    xmin, xmax = spec.xy_range

    chunks = []
    gx = rng.uniform(xmin, xmax, size=n_ground)
    gy = rng.uniform(xmin, xmax, size=n_ground)
    gz = np.zeros(n_ground)
    g_int = np.full(n_ground, 0.08)
    chunks.append(np.stack([gx, gy, gz, g_int], axis=1))

    if boxes:
        n_obj = n_total - n_ground
        areas = np.array([_surface_area(b) for b in boxes])
        share = areas / areas.sum()
        counts = np.floor(share * n_obj).astype(int)
        counts[-1] += n_obj - counts.sum()
        for box, m in zip(boxes, counts):
            if m > 0:
                chunks.append(_sample_box_surface(box, m, spec.n_classes, rng))

    pts = np.concatenate(chunks, axis=0)
    pts[:, :3] += rng.normal(0.0, spec.noise_sigma, size=(len(pts), 3))
    pts[:, 3] = np.clip(pts[:, 3] + rng.normal(0.0, 0.02, size=len(pts)), 0.0, 1.0)

    keep = (
        (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax)
        & (pts[:, 1] >= xmin) & (pts[:, 1] <= xmax)
        & (pts[:, 2] >= spec.z_range[0]) & (pts[:, 2] <= spec.z_range[1])
    )
    return pts[keep].astype(np.float32)


def _surface_area(box: Box3D) -> float:
    l, w, h = box.size
    return 2.0 * (l * w + l * h + w * h)


def _sample_box_surface(box: Box3D, m: int, n_classes: int, rng) -> np.ndarray:
    l, w, h = box.size
    areas = np.array([l * w, l * w, w * h, w * h, l * h, l * h])
    face = rng.choice(6, size=m, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=m)
    v = rng.uniform(-0.5, 0.5, size=m)

    local = np.zeros((m, 3))
    for f, (ax_fixed, sign, ax_u, ax_v, su, sv) in enumerate(
        (
            (2, +1, 0, 1, l, w),  # top
            (2, -1, 0, 1, l, w),  # bottom
            (0, +1, 1, 2, w, h),  # +x side
            (0, -1, 1, 2, w, h),  # -x side
            (1, +1, 0, 2, l, h),  # +y side
            (1, -1, 0, 2, l, h),  # -y side
        )
    ):
        sel = face == f
        local[sel, ax_fixed] = sign * (l, w, h)[ax_fixed] / 2.0
        local[sel, ax_u] = u[sel] * su
        local[sel, ax_v] = v[sel] * sv

    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    intensity = np.full(m, (box.class_id + 1) / (n_classes + 1))
    return np.concatenate([world, intensity[:, None]], axis=1)


def render_views(spec: WorldSpec, boxes: list[Box3D]) -> list[CameraView]:
    """Render all surround views: solid class-colored boxes over a gray background."""
    views = []
    for K, pose in geometry.surround_rig(spec.n_views, spec.cam_height, spec.image_hw):
        img, _, _ = render_view(K, pose, boxes, spec.image_hw, spec.n_classes)
        views.append(CameraView(image=img, intrinsics=K, cam_to_world=pose))
    return views


def render_view(K, pose, boxes, image_hw, n_classes):
    """One view via ray casting; also returns the z-depth and hit-index buffers."""
    depth, hit = geometry.raycast_boxes(K, pose, boxes, image_hw)
    img = np.full((*image_hw, 3), 0.5, dtype=np.float32)
    for bi, box in enumerate(boxes):
        img[hit == bi] = geometry.class_color(box.class_id, n_classes).astype(np.float32)
    return img, depth, hit


# ---------------------------------------------------------------------------
# Dataset on disk


def scene_dir(root, scene_id: int) -> Path:
    return Path(root) / "scenes" / f"scene_{scene_id:06d}"


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((dataset_seed, index)).generate_state(1)[0])


def build_dataset(
    spec: WorldSpec,
    n_scenes: int,
    seed: int,
    out_dir,
    train_fraction: float = 0.8,
    force: bool = False,
) -> dict:
    """Generate ``n_scenes`` scenes, write them under ``out_dir``, return the manifest."""
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    spec.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(
            f"output directory {out} is not empty; pass force=True to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)

    for i in range(n_scenes):
        scene = generate_scene(spec, scene_seed(seed, i))
        scene.scene_id = i
        save_scene(scene, scene_dir(out, i))

    n_train = int(round(n_scenes * train_fraction))
    manifest = {
        "format_version": 1,
        "seed": seed,
        "n_scenes": n_scenes,
        "train_ids": list(range(n_train)),
        "val_ids": list(range(n_train, n_scenes)),
        "world": dataclasses.asdict(spec),
    }
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def save_scene(scene: Scene, sdir) -> None:
    sdir = Path(sdir)
    (sdir / "views").mkdir(parents=True, exist_ok=True)
    pts = np.ascontiguousarray(scene.points, dtype="<f4")
    pts.tofile(sdir / "points.bin")
    with open(sdir / "boxes.json", "w") as fh:
        json.dump(
            [
                {"center": list(b.center), "size": list(b.size), "yaw": b.yaw, "class_id": b.class_id}
                for b in scene.boxes
            ],
            fh,
            indent=1,
        )
    with open(sdir / "calib.json", "w") as fh:
        json.dump(
            [
                {"intrinsics": v.intrinsics.tolist(), "cam_to_world": v.cam_to_world.tolist()}
                for v in scene.views
            ],
            fh,
            indent=1,
        )
    for vi, view in enumerate(scene.views):
        arr = np.clip(np.rint(view.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(sdir / "views" / f"view_{vi:02d}.png")


def load_scene(sdir, scene_id: int | None = None) -> Scene:
    sdir = Path(sdir)
    pts = np.fromfile(sdir / "points.bin", dtype="<f4").reshape(-1, 4)
    with open(sdir / "boxes.json") as fh:
        boxes = [
            Box3D(tuple(b["center"]), tuple(b["size"]), b["yaw"], b["class_id"])
            for b in json.load(fh)
        ]
    with open(sdir / "calib.json") as fh:
        calib = json.load(fh)
    views = []
    for vi, cal in enumerate(calib):
        img = np.asarray(Image.open(sdir / "views" / f"view_{vi:02d}.png"), dtype=np.float32) / 255.0
        views.append(
            CameraView(
                image=img,
                intrinsics=np.asarray(cal["intrinsics"], dtype=np.float64),
                cam_to_world=np.asarray(cal["cam_to_world"], dtype=np.float64),
            )
        )
    if scene_id is None:
        scene_id = int(sdir.name.split("_")[-1])
    return Scene(scene_id=scene_id, boxes=boxes, points=pts, views=views)


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def world_from_manifest(manifest: dict) -> WorldSpec:
    raw = manifest["world"]
    fields = {}
    for f in dataclasses.fields(WorldSpec):
        value = raw[f.name]
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        fields[f.name] = value
    return WorldSpec(**fields)


def load_split(data_dir, split: str) -> list[Scene]:
    manifest = load_manifest(data_dir)
    ids = manifest["train_ids"] if split == "train" else manifest["val_ids"]
    return [load_scene(scene_dir(data_dir, i), i) for i in ids]
