"""Single-stage joint training with hybrid supervision, plus BEV augmentation.

Training is deterministic given the seed: model init, scene order and
augmentation draws all derive from it, and checkpoints carry the optimizer
state so an interrupted run resumes bit-exactly at the next epoch boundary.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_from_dict, config_to_dict
from .errors import ConfigError, TrainingError
from .geometry import wrap_angle, Box3D
from .model import PromptedDetector, SceneBatch, build_model
from .scenes import CameraView, Scene, load_manifest, load_scene, scene_dir, world_from_manifest

CHECKPOINT_VERSION = 1
LOG_NAME = "train_log.jsonl"

# camera-frame x flip that keeps a mirrored rig right-handed
_FLIP_CAM = np.diag([-1.0, 1.0, 1.0, 1.0])
_MIRROR_X = np.diag([-1.0, 1.0, 1.0, 1.0])
_MIRROR_Y = np.diag([1.0, -1.0, 1.0, 1.0])


def apply_determinism_env() -> bool:
    """Honor BEVLAB_DETERMINISTIC=1: single numeric thread, deterministic kernels."""
    if os.environ.get("BEVLAB_DETERMINISTIC", "") == "1":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        return True
    return False


# ---------------------------------------------------------------------------
# Synchronous BEV augmentation


def _rot_xy(x, y, k: int):
    k = k % 4
    if k == 0:
        return x, y
    if k == 1:
        return -y, x
    if k == 2:
        return -x, -y
    return y, -x


def _rot_mat4(k: int) -> np.ndarray:
    m = np.eye(4)
    c = ((1, 0), (0, 1), (-1, 0), (0, -1))[k % 4]
    m[0, 0], m[0, 1] = c[0], -c[1]
    m[1, 0], m[1, 1] = c[1], c[0]
    return m


def augment_scene(scene: Scene, k_rot: int, flip_x: bool, flip_y: bool) -> Scene:
    """Rotate the world by k_rot * 90 deg about +z, then optionally mirror x / y.

    Points, boxes and camera poses transform together. Rotations by exact
    quarter turns are coordinate swaps (no trig), so applying one twice is an
    exact involution. A mirror alone would make the camera poses left-handed;
    each mirror is therefore paired with a camera-axis flip and a horizontal
    image flip, which keeps poses rigid and the views consistent with the
    mirrored geometry.
    """
    pts = scene.points.copy()
    x, y = _rot_xy(pts[:, 0].copy(), pts[:, 1].copy(), k_rot)
    if flip_x:
        x = -x
    if flip_y:
        y = -y
    pts[:, 0], pts[:, 1] = x, y

    boxes = []
    for b in scene.boxes:
        bx, by = _rot_xy(b.center[0], b.center[1], k_rot)
        yaw = wrap_angle(b.yaw + (k_rot % 4) * (math.pi / 2.0))
        if flip_x:
            bx = -bx
            yaw = wrap_angle(math.pi - yaw)
        if flip_y:
            by = -by
            yaw = wrap_angle(-yaw)
        boxes.append(Box3D((bx, by, b.center[2]), b.size, yaw, b.class_id))

    world_tf = _rot_mat4(k_rot)
    n_flips = 0
    if flip_x:
        world_tf = _MIRROR_X @ world_tf
        n_flips += 1
    if flip_y:
        world_tf = _MIRROR_Y @ world_tf
        n_flips += 1

    views = []
    for v in scene.views:
        pose = world_tf @ v.cam_to_world
        if n_flips % 2 == 1:
            pose = pose @ _FLIP_CAM
            img = v.image[:, ::-1].copy()
        else:
            img = v.image.copy()
        views.append(CameraView(image=img, intrinsics=v.intrinsics.copy(), cam_to_world=pose))

    return Scene(scene_id=scene.scene_id, boxes=boxes, points=pts, views=views)


def random_augment(scene: Scene, rng) -> Scene:
    k = int(rng.integers(4))
    flip_x = bool(rng.random() < 0.5)
    flip_y = bool(rng.random() < 0.5)
    return augment_scene(scene, k, flip_x, flip_y)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: PromptedDetector, optimizer, cfg: TrainConfig, epoch: int):
    arrays = {}
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for idx, entry in state.items():
            for key, val in entry.items():
                arrays[f"opt/{idx}/{key}"] = (
                    val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                )
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": config_to_dict(cfg),
    }
    path = Path(path)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, meta_json=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (cfg, model, opt_state, epoch); opt_state is {idx: {key: array}}."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta_json"]))
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version in {path}")
    cfg, _ = config_from_dict(meta["config"])
    model = build_model(cfg)
    state = {}
    opt_state: dict[int, dict] = {}
    for key in data.files:
        if key.startswith("param/"):
            state[key[len("param/"):]] = torch.from_numpy(data[key])
        elif key.startswith("opt/"):
            _, idx, name = key.split("/", 2)
            opt_state.setdefault(int(idx), {})[name] = data[key]
    model.load_state_dict(state)
    return cfg, model, opt_state, meta["epoch"]


def _restore_optimizer(optimizer, opt_state):
    if not opt_state:
        return
    groups = optimizer.state_dict()["param_groups"]
    state = {}
    for idx, entry in opt_state.items():
        state[idx] = {
            key: torch.from_numpy(np.asarray(val)) for key, val in entry.items()
        }
    optimizer.load_state_dict({"state": state, "param_groups": groups})


# ---------------------------------------------------------------------------
# Fitting


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * (cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0)


def load_training_scenes(data_dir, split: str = "train") -> list[Scene]:
    manifest = load_manifest(data_dir)
    ids = manifest[f"{split}_ids"]
    return [load_scene(scene_dir(data_dir, i), i) for i in ids]


def fit(cfg: TrainConfig, data_dir, out_dir, resume: bool = True) -> Path:
    """Train per the config on the dataset's train split; returns the final checkpoint path."""
    apply_determinism_env()
    cfg.validate()
    manifest = load_manifest(data_dir)
    if world_from_manifest(manifest) != cfg.world:
        raise ConfigError("config world does not match the dataset manifest")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = load_training_scenes(data_dir)
    if not scenes:
        raise ConfigError("dataset has no training scenes")

    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )

    start_epoch = 0
    last = out / "last.npz"
    log_path = out / LOG_NAME
    if resume and last.exists():
        _, model, opt_state, epoch = load_checkpoint(last)
        optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        _restore_optimizer(optimizer, opt_state)
        start_epoch = epoch + 1
    elif log_path.exists():
        log_path.unlink()

    for epoch in range(start_epoch, cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
        order = rng.permutation(len(scenes))

        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        n_steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            ids = order[lo: lo + cfg.batch_size]
            batch_scenes = [
                random_augment(scenes[i], rng) if cfg.augment else scenes[i] for i in ids
            ]
            batch = SceneBatch.from_scenes(batch_scenes)
            components, diags = model.forward_train(batch, cfg.weights, cfg.detach_fusion)
            total = sum(components.values())
            for name, value in components.items():
                if not torch.isfinite(value):
                    raise TrainingError(
                        f"loss component {name!r} became non-finite at epoch {epoch}"
                    )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            n_steps += 1
            for key, val in diags.items():
                sums[key] = sums.get(key, 0.0) + val
                counts[key] = counts.get(key, 0) + 1

        record = {"epoch": epoch, "lr": lr, "steps": n_steps}
        record.update({k: sums[k] / counts[k] for k in sorted(sums)})
        record["loss"] = sum(
            record.get(k, 0.0) for k in ("det_fusion", "det_camera", "fea", "rel", "resp")
        )
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        save_checkpoint(last, model, optimizer, cfg, epoch)

    final = out / "final.npz"
    save_checkpoint(final, model, optimizer, cfg, cfg.epochs - 1)
    return final


def read_training_log(out_dir) -> list[dict]:
    path = Path(out_dir) / LOG_NAME
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
