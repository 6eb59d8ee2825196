"""The full detector: camera base model plus the optional LiDAR prompter.

The parameter set splits exactly into {base, prompter}: base is the image
backbone, pyramid poolers, imitation module and the shared BEV encoder/head;
prompter is the LiDAR voxel encoder and the hierarchical fusion module. In
``camera_baseline`` mode neither prompter nor imitation module exists and the
camera BEV feature is the parameter-free vertical mean of the scale-1 level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import DistillWeights, GridSpec, ModelSpec, TrainConfig, WorldSpec
from .detector import (
    BEVEncoder,
    CenterHead,
    ResponseMap,
    build_targets_batch,
    decode,
    detection_loss,
)
from .distill import ImitationModule, combined_distill_loss
from .errors import ModeError
from .fusion import HierarchicalGatedFusion
from .lift import CameraLift
from .pyramid import VoxelPyramid
from .voxels import LidarVoxelEncoder

PROMPTER_PREFIXES = ("lidar.", "fusion.")


@dataclass
class SceneBatch:
    """Scenes packed for the model: stacked views plus per-scene point lists."""

    images: torch.Tensor  # (B, V, 3, h, w)
    intrinsics: torch.Tensor  # (B, V, 3, 3) float64
    cam_to_world: torch.Tensor  # (B, V, 4, 4) float64
    points: list[torch.Tensor]  # per scene (N, 4)
    boxes: list[list]

    @staticmethod
    def from_scenes(scenes, dtype=torch.float32, device="cpu") -> "SceneBatch":
        images = torch.stack(
            [
                torch.stack(
                    [torch.from_numpy(v.image.transpose(2, 0, 1).copy()) for v in s.views]
                )
                for s in scenes
            ]
        ).to(dtype=dtype, device=device)
        intr = torch.stack(
            [torch.stack([torch.from_numpy(v.intrinsics.copy()) for v in s.views]) for s in scenes]
        ).to(device)
        poses = torch.stack(
            [torch.stack([torch.from_numpy(v.cam_to_world.copy()) for v in s.views]) for s in scenes]
        ).to(device)
        points = [torch.from_numpy(np.ascontiguousarray(s.points)).to(dtype=dtype, device=device) for s in scenes]
        return SceneBatch(
            images=images,
            intrinsics=intr,
            cam_to_world=poses,
            points=points,
            boxes=[list(s.boxes) for s in scenes],
        )


class PromptedDetector(nn.Module):
    """Camera BEV detector with an optional LiDAR-assisted prompter."""

    def __init__(self, world: WorldSpec, grid: GridSpec, spec: ModelSpec, mode: str = "prompted"):
        super().__init__()
        assert mode in ("prompted", "fusion_only", "camera_baseline")
        self.mode = mode
        self.grid = grid
        self.world = world
        self.spec = spec
        self.n_classes = world.n_classes

        self.camera = CameraLift(grid, spec)
        self.encoder = BEVEncoder(grid.channels, spec.c_encoder, spec.n_encoder_blocks)
        self.head = CenterHead(spec.c_encoder, self.n_classes)
        if mode != "camera_baseline":
            self.lidar = LidarVoxelEncoder(grid)
            self.fusion = HierarchicalGatedFusion(grid)
            self.imitation = ImitationModule(grid)

    @property
    def has_prompter(self) -> bool:
        return self.mode != "camera_baseline"

    # -- parameter partition ------------------------------------------------

    def prompter_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(PROMPTER_PREFIXES)]

    def base_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(PROMPTER_PREFIXES)]

    # -- branches -------------------------------------------------------------

    def camera_pyramid(self, batch: SceneBatch) -> VoxelPyramid:
        return self.camera(batch.images, batch.intrinsics, batch.cam_to_world)

    def camera_bev(self, cam_pyr: VoxelPyramid) -> torch.Tensor:
        """Camera-branch BEV feature; never looks at LiDAR points."""
        level1 = cam_pyr.levels[1]
        if self.has_prompter:
            return self.imitation(level1)
        return level1.mean(dim=2)  # parameter-free vertical reduction

    def fused_bev(self, batch: SceneBatch, cam_pyr: VoxelPyramid) -> torch.Tensor:
        if not self.has_prompter:
            raise ModeError("camera_baseline model has no fusion branch")
        return self.fusion(self.lidar(batch.points), cam_pyr)

    # -- training forward ----------------------------------------------------

    def forward_train(
        self,
        batch: SceneBatch,
        weights: DistillWeights,
        detach_fusion: bool = True,
    ):
        """Compute all loss components active in the current mode.

        Returns (components, diagnostics): ``components`` are the weighted
        terms of the training objective (their sum is the total loss);
        ``diagnostics`` holds raw float values plus the mean BEV L2 distance
        between the fusion and camera features.
        """
        cam_pyr = self.camera_pyramid(batch)
        want_camera = self.mode != "fusion_only"
        want_fusion = self.mode != "camera_baseline"

        f_f = enc_f = resp_f = None
        f_c = enc_c = resp_c = None
        if want_fusion:
            f_f = self.fused_bev(batch, cam_pyr)
        if want_camera:
            f_c = self.camera_bev(cam_pyr)

        # one encoder/head call over both branches (shared parameters)
        if f_f is not None and f_c is not None:
            enc = self.encoder(torch.cat([f_f, f_c], dim=0))
            resp = self.head(enc)
            B = f_f.shape[0]
            enc_f, enc_c = enc[:B], enc[B:]
            resp_f = ResponseMap(resp.heatmaps[:B], resp.regression[:B])
            resp_c = ResponseMap(resp.heatmaps[B:], resp.regression[B:])
        elif f_f is not None:
            enc_f = self.encoder(f_f)
            resp_f = self.head(enc_f)
        else:
            enc_c = self.encoder(f_c)
            resp_c = self.head(enc_c)

        targets = build_targets_batch(batch.boxes, self.grid, self.n_classes)
        components: dict[str, torch.Tensor] = {}
        if want_fusion:
            components["det_fusion"] = detection_loss(resp_f, batch.boxes, self.grid, targets)
        if want_camera:
            components["det_camera"] = detection_loss(resp_c, batch.boxes, self.grid, targets)

        diagnostics: dict[str, float] = {}
        if self.mode == "prompted":
            _, parts = combined_distill_loss(
                f_f, f_c, enc_f, enc_c, resp_f, resp_c,
                batch.boxes, self.grid, weights, detach_fusion, targets=targets,
            )
            components["fea"] = weights.fea * parts["fea"]
            components["rel"] = weights.rel * parts["rel"]
            components["resp"] = weights.resp * parts["resp"]
            diagnostics.update({f"raw_{k}": float(v.detach()) for k, v in parts.items()})

        if f_f is not None and f_c is not None:
            with torch.no_grad():
                diagnostics["f_dist"] = float(
                    (f_f - f_c).norm(dim=1).mean()
                )
        diagnostics.update({k: float(v.detach()) for k, v in components.items()})
        return components, diagnostics

    # -- inference ------------------------------------------------------------

    @torch.no_grad()
    def predict(self, scene, use_lidar: bool, score_thresh: float = 0.05, max_dets: int = 16):
        """Detect boxes in one scene.

        ``use_lidar=True`` runs the fusion path (LiDAR modality switch off);
        ``use_lidar=False`` runs the camera-only path, which never reads the
        point cloud.
        """
        if use_lidar and not self.has_prompter:
            raise ModeError("model was trained in camera_baseline mode; no LiDAR path exists")
        dtype = self.head.heat.weight.dtype
        batch = SceneBatch.from_scenes([scene], dtype=dtype)
        cam_pyr = self.camera_pyramid(batch)
        if use_lidar:
            bev = self.fused_bev(batch, cam_pyr)
        else:
            bev = self.camera_bev(cam_pyr)
        resp = self.head(self.encoder(bev))
        return decode(resp, self.grid, score_thresh=score_thresh, max_dets=max_dets)[0]


def build_model(cfg: TrainConfig) -> PromptedDetector:
    torch.manual_seed(cfg.seed)
    return PromptedDetector(cfg.world, cfg.grid(), cfg.model, cfg.mode)
