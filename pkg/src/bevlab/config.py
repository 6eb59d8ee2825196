"""World, grid, model and training configuration.

A run is fully described by a YAML file with a ``version`` key and optional
``world`` / ``grid`` / ``model`` / ``train`` / ``data`` sections; any field
left out falls back to the defaults below. Unknown keys are rejected so typos
fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

CONFIG_VERSION = 1

# Named (lambda1, lambda2, lambda3) presets for the distillation weights.
LAMBDA_PROFILES = {
    "a": (1.1, 8.0, 2.0),
    "b": (1.5, 10.0, 2.5),
    "c": (8.0, 25.0, 10.0),
}

MODES = ("prompted", "fusion_only", "camera_baseline")


@dataclass(frozen=True)
class WorldSpec:
    """Geometry and content of the synthetic world.

    Classes are color-coded in the rendered views so the camera branch has a
    learnable recognition task; LiDAR points are sampled on box surfaces and
    the ground plane.
    """

    xy_range: tuple[float, float] = (-16.0, 16.0)
    z_range: tuple[float, float] = (-2.0, 2.0)
    class_names: tuple[str, ...] = ("car", "pedestrian", "truck")
    # (length, width, height) in meters per class
    class_sizes: tuple[tuple[float, float, float], ...] = (
        (4.0, 2.0, 1.6),
        (0.6, 0.6, 1.7),
        (7.0, 2.6, 2.8),
    )
    size_jitter: float = 0.1
    n_boxes_range: tuple[int, int] = (1, 8)
    points_per_scene: int = 4096
    ground_point_fraction: float = 0.5
    noise_sigma: float = 0.02
    n_views: int = 4
    image_hw: tuple[int, int] = (48, 96)
    cam_height: float = 1.6
    # boxes keep this BEV distance from the sensor origin and from each other
    ego_clearance: float = 2.0
    min_center_sep: float = 3.0
    footprint_margin: float = 0.5

    @property
    def n_classes(self) -> int:
        return len(self.class_sizes)

    def validate(self) -> None:
        if self.xy_range[1] <= self.xy_range[0] or self.z_range[1] <= self.z_range[0]:
            raise ConfigError("world ranges must be non-empty")
        if self.n_classes < 1:
            raise ConfigError("need at least one object class")
        if len(self.class_names) != self.n_classes:
            raise ConfigError("class_names and class_sizes length mismatch")
        if self.n_views < 1:
            raise ConfigError("need at least one camera view")
        if self.n_boxes_range[0] < 0 or self.n_boxes_range[1] < self.n_boxes_range[0]:
            raise ConfigError("invalid n_boxes_range")
        if self.z_range[0] > 0.0:
            raise ConfigError("ground plane z=0 must lie inside z_range")
        extent_x = self.xy_range[1] - self.xy_range[0]
        extent_y = self.xy_range[1] - self.xy_range[0]
        grow = 1.0 + self.size_jitter
        for name, (l, w, h) in zip(self.class_names, self.class_sizes):
            if min(l, w, h) <= 0.0:
                raise ConfigError(f"class {name!r} has non-positive size")
            if l * grow >= extent_x or w * grow >= extent_y:
                raise ConfigError(
                    f"class {name!r} footprint {l}x{w} m cannot fit in the world range"
                )


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid covering the world, with three dyadic scales i=0,1,2.

    ``shape_dhw`` is the full-resolution (scale 0) extent; every axis must be
    divisible by 4 so the coarser scales are exact. The BEV plane is the
    scale-1 horizontal grid, i.e. (H/2) x (W/2) cells of size 2*voxel.
    """

    origin: tuple[float, float, float]  # (x_min, y_min, z_min)
    voxel_size: tuple[float, float, float]  # (sx, sy, sz) at scale 0
    shape_dhw: tuple[int, int, int]  # (D, H, W): z, y, x extents in voxels
    channels: int = 6

    @staticmethod
    def from_world(
        world: WorldSpec,
        voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0),
        channels: int = 6,
    ) -> "GridSpec":
        sx, sy, sz = voxel_size
        ext_x = world.xy_range[1] - world.xy_range[0]
        ext_y = world.xy_range[1] - world.xy_range[0]
        ext_z = world.z_range[1] - world.z_range[0]
        W = int(round(ext_x / sx))
        H = int(round(ext_y / sy))
        D = int(round(ext_z / sz))
        spec = GridSpec(
            origin=(world.xy_range[0], world.xy_range[0], world.z_range[0]),
            voxel_size=(float(sx), float(sy), float(sz)),
            shape_dhw=(D, H, W),
            channels=channels,
        )
        spec.validate((ext_x, ext_y, ext_z))
        return spec

    def validate(self, extents: tuple[float, float, float] | None = None) -> None:
        D, H, W = self.shape_dhw
        for n, axis in ((D, "D"), (H, "H"), (W, "W")):
            if n % 4 != 0 or n <= 0:
                raise ConfigError(f"grid extent {axis}={n} must be positive and divisible by 4")
        if self.channels < 1:
            raise ConfigError("grid channels must be >= 1")
        if extents is not None:
            ext_x, ext_y, ext_z = extents
            sx, sy, sz = self.voxel_size
            if W * sx != ext_x or H * sy != ext_y or D * sz != ext_z:
                raise ConfigError(
                    "voxel counts x sizes must reproduce the world ranges exactly; "
                    f"got {W}*{sx} x {H}*{sy} x {D}*{sz} for extents {extents}"
                )

    def level_shape(self, scale: int) -> tuple[int, int, int]:
        D, H, W = self.shape_dhw
        f = 2 ** scale
        return (D // f, H // f, W // f)

    def level_voxel_size(self, scale: int) -> tuple[float, float, float]:
        f = float(2 ** scale)
        sx, sy, sz = self.voxel_size
        return (sx * f, sy * f, sz * f)

    @property
    def bev_shape(self) -> tuple[int, int]:
        """(rows, cols) of the BEV plane = scale-1 horizontal grid."""
        _, H, W = self.shape_dhw
        return (H // 2, W // 2)

    @property
    def bev_cell(self) -> tuple[float, float]:
        """(cell_w, cell_h) in meters along x and y."""
        sx, sy, _ = self.voxel_size
        return (2.0 * sx, 2.0 * sy)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyper-parameters of the detector and prompter."""

    c_img: int = 32
    n_depth_bins: int = 24
    depth_range: tuple[float, float] = (0.5, 24.0)
    c_encoder: int = 64
    n_encoder_blocks: int = 2

    def validate(self) -> None:
        if self.n_depth_bins < 4:
            raise ConfigError("need at least 4 depth bins")
        if self.depth_range[1] <= self.depth_range[0] or self.depth_range[0] <= 0:
            raise ConfigError("invalid depth_range")


@dataclass(frozen=True)
class DistillWeights:
    """Weights (lambda1, lambda2, lambda3) of the three distillation terms."""

    fea: float = 1.1
    rel: float = 8.0
    resp: float = 2.0

    def validate(self) -> None:
        if min(self.fea, self.rel, self.resp) < 0:
            raise ConfigError("distillation weights must be non-negative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.fea, self.rel, self.resp)


@dataclass
class TrainConfig:
    """Everything a training run needs, including the world and grid."""

    world: WorldSpec = field(default_factory=WorldSpec)
    grid_voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channels: int = 6
    model: ModelSpec = field(default_factory=ModelSpec)
    mode: str = "prompted"
    detach_fusion: bool = True
    weights: DistillWeights = field(default_factory=DistillWeights)
    epochs: int = 20
    batch_size: int = 4
    lr: float = 2e-3
    lr_decay_epoch: int = 16
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-2
    seed: int = 0
    augment: bool = True
    score_thresh: float = 0.05
    max_dets: int = 16

    def validate(self) -> None:
        self.world.validate()
        self.model.validate()
        self.weights.validate()
        self.grid().validate()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (0.0 < self.score_thresh < 1.0):
            raise ConfigError("score_thresh must lie in (0, 1)")

    def grid(self) -> GridSpec:
        return GridSpec.from_world(self.world, self.grid_voxel_size, self.channels)


@dataclass
class DataConfig:
    n_scenes: int = 250
    train_fraction: float = 0.8
    seed: int = 0


# ---------------------------------------------------------------------------
# YAML (de)serialization


def _apply_section(obj, section: dict, path: str):
    valid = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in section.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {path}.{key!r}")
        current = getattr(obj, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = _as_tuple(value)
        updates[key] = value
    return dataclasses.replace(obj, **updates)


def _as_tuple(value):
    return tuple(_as_tuple(v) if isinstance(v, list) else v for v in value)


def config_from_dict(raw: dict) -> tuple[TrainConfig, DataConfig]:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if "version" not in raw:
        raise ConfigError("missing required key 'version'")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw['version']!r}")

    known = {"version", "world", "grid", "model", "train", "data"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")

    cfg = TrainConfig()
    data = DataConfig()
    try:
        cfg.world = _apply_section(cfg.world, raw.get("world", {}) or {}, "world")

        grid_sec = dict(raw.get("grid", {}) or {})
        if "voxel_size" in grid_sec:
            cfg.grid_voxel_size = _as_tuple(grid_sec.pop("voxel_size"))
        if "channels" in grid_sec:
            cfg.channels = int(grid_sec.pop("channels"))
        if grid_sec:
            raise ConfigError(f"unknown config key grid.{next(iter(grid_sec))!r}")

        cfg.model = _apply_section(cfg.model, raw.get("model", {}) or {}, "model")

        train_sec = dict(raw.get("train", {}) or {})
        if "lambda_profile" in train_sec:
            profile = train_sec.pop("lambda_profile")
            if profile not in LAMBDA_PROFILES:
                raise ConfigError(f"unknown lambda_profile {profile!r}")
            cfg.weights = DistillWeights(*LAMBDA_PROFILES[profile])
        if "lambdas" in train_sec:
            lam = train_sec.pop("lambdas")
            if not isinstance(lam, list) or len(lam) != 3:
                raise ConfigError("train.lambdas must be a list of three numbers")
            cfg.weights = DistillWeights(*[float(v) for v in lam])
        valid = {f.name for f in dataclasses.fields(TrainConfig)} - {"world", "model", "weights"}
        for key, value in train_sec.items():
            if key not in valid:
                raise ConfigError(f"unknown config key train.{key!r}")
            if isinstance(getattr(cfg, key), tuple) and isinstance(value, list):
                value = _as_tuple(value)
            setattr(cfg, key, value)

        data = _apply_section(data, raw.get("data", {}) or {}, "data")
    except TypeError as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc

    cfg.validate()
    if data.n_scenes < 1 or not (0.0 < data.train_fraction < 1.0):
        raise ConfigError("data.n_scenes must be >= 1 and train_fraction in (0, 1)")
    return cfg, data


def load_config(path) -> tuple[TrainConfig, DataConfig]:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}")
    return config_from_dict(raw or {})


def config_to_dict(cfg: TrainConfig, data: DataConfig | None = None) -> dict:
    out = {
        "version": CONFIG_VERSION,
        "world": dataclasses.asdict(cfg.world),
        "grid": {"voxel_size": list(cfg.grid_voxel_size), "channels": cfg.channels},
        "model": dataclasses.asdict(cfg.model),
        "train": {
            "mode": cfg.mode,
            "detach_fusion": cfg.detach_fusion,
            "lambdas": list(cfg.weights.as_tuple()),
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "lr_decay_epoch": cfg.lr_decay_epoch,
            "lr_decay_factor": cfg.lr_decay_factor,
            "weight_decay": cfg.weight_decay,
            "seed": cfg.seed,
            "augment": cfg.augment,
            "score_thresh": cfg.score_thresh,
            "max_dets": cfg.max_dets,
        },
    }
    if data is not None:
        out["data"] = dataclasses.asdict(data)
    return _plain(out)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
