"""Shared container for per-modality multi-scale voxel feature grids."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import GridSpec


@dataclass
class VoxelPyramid:
    """Three dense feature levels, level i shaped (B, C, D/2^i, H/2^i, W/2^i)."""

    levels: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    modality: str  # "lidar" | "camera"

    def __post_init__(self):
        assert len(self.levels) == 3, "a pyramid has exactly 3 levels"
        assert self.modality in ("lidar", "camera")

    def check_shapes(self, grid: GridSpec) -> None:
        B = self.levels[0].shape[0]
        for i, lvl in enumerate(self.levels):
            assert lvl.shape == (B, grid.channels, *grid.level_shape(i)), (
                f"level {i} has shape {tuple(lvl.shape)}, "
                f"expected {(B, grid.channels, *grid.level_shape(i))}"
            )

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(lvl).all()) for lvl in self.levels)
