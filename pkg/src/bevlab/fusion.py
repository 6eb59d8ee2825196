"""Hierarchical gated LiDAR/camera fusion: the trainable core of the prompter.

Per scale, a softmax gate blends the two modalities voxel-wise; the three
fused levels are then resampled to the middle grid, blended by a second
softmax gate, and flattened vertically into a single BEV feature map. Gate
convolutions start at zero so training begins from an unbiased mixture.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GridSpec
from .pyramid import VoxelPyramid


def depth_major_flatten(x: torch.Tensor) -> torch.Tensor:
    """(B, C, D, H, W) -> (B, D*C, H, W) with channel index z*C + c."""
    B, C, D, H, W = x.shape
    return x.permute(0, 2, 1, 3, 4).reshape(B, D * C, H, W)


class HierarchicalGatedFusion(nn.Module):
    """Scale-wise gated fusion plus adaptive cross-scale aggregation to BEV."""

    def __init__(self, grid: GridSpec):
        super().__init__()
        self.grid = grid
        C = grid.channels
        D2 = grid.shape_dhw[0] // 2
        self.lidar_convs = nn.ModuleList(nn.Conv3d(C, C, 3, padding=1) for _ in range(3))
        self.camera_convs = nn.ModuleList(nn.Conv3d(C, C, 3, padding=1) for _ in range(3))
        self.scale_gates = nn.ModuleList(nn.Conv3d(2 * C, 2, 1) for _ in range(3))
        self.level_convs = nn.ModuleList(nn.Conv3d(C, C, 3, padding=1) for _ in range(3))
        self.level_gate = nn.Conv3d(3 * C, 3, 1)
        self.bev_reduce = nn.Conv2d(D2 * C, C, 1)
        for gate in (*self.scale_gates, self.level_gate):
            nn.init.zeros_(gate.weight)
            nn.init.zeros_(gate.bias)

    def fuse_scale(self, f_lidar: torch.Tensor, f_camera: torch.Tensor, scale: int):
        """Gated voxel-wise blend of the two modalities at one scale."""
        assert f_lidar.shape == f_camera.shape, "modality features must share a shape"
        mixed = torch.cat(
            [self.lidar_convs[scale](f_lidar), self.camera_convs[scale](f_camera)], dim=1
        )
        gates = torch.softmax(self.scale_gates[scale](mixed), dim=1)  # (B, 2, D, H, W)
        return gates[:, 0:1] * f_lidar + gates[:, 1:2] * f_camera

    def combine_levels(self, f0, f1, f2):
        """Resample levels 0 and 2 onto the level-1 grid and blend adaptively."""
        target = f1.shape[-3:]
        f0r = F.interpolate(f0, size=target, mode="trilinear", align_corners=False)
        f2r = F.interpolate(f2, size=target, mode="trilinear", align_corners=False)
        stacked = torch.cat(
            [self.level_convs[0](f0r), self.level_convs[1](f1), self.level_convs[2](f2r)], dim=1
        )
        gates = torch.softmax(self.level_gate(stacked), dim=1)  # (B, 3, D/2, H/2, W/2)
        return gates[:, 0:1] * f0r + gates[:, 1:2] * f1 + gates[:, 2:3] * f2r

    def flatten_bev(self, x: torch.Tensor) -> torch.Tensor:
        return self.bev_reduce(depth_major_flatten(x))

    def aggregate(self, f0, f1, f2) -> torch.Tensor:
        return self.flatten_bev(self.combine_levels(f0, f1, f2))

    def forward(self, lidar: VoxelPyramid, camera: VoxelPyramid) -> torch.Tensor:
        """Fuse both pyramids into the BEV feature map (B, C, H/2, W/2)."""
        fused = [self.fuse_scale(lidar.levels[i], camera.levels[i], i) for i in range(3)]
        return self.aggregate(*fused)
