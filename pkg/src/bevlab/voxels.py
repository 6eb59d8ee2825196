"""Dynamic point-cloud voxelization and the LiDAR voxel-feature pyramid.

Voxelization is "dynamic": every point of a voxel contributes to its mean
feature, with no per-voxel cap. Means are accumulated in float64 and only then
cast to the working dtype, which makes the result independent of point order.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import GridSpec
from .pyramid import VoxelPyramid


def _voxelize_merged(points: torch.Tensor, batch_idx: torch.Tensor, grid: GridSpec, scale: int):
    """Voxelize a merged multi-scene cloud.

    ``points`` is (N, 4), ``batch_idx`` (N,) int64. Returns (lin, feats) where
    ``lin`` is the batch-offset linear voxel index (sorted, one entry per
    occupied voxel) and ``feats`` the (M, 4) float64 per-voxel mean of
    (dx, dy, dz, intensity) offsets from the voxel center.
    """
    dz, hy, wx = grid.level_shape(scale)
    device = points.device
    if points.numel() == 0:
        return (
            torch.zeros((0,), dtype=torch.int64, device=device),
            torch.zeros((0, 4), dtype=torch.float64, device=device),
        )

    pts = points.to(torch.float64)
    origin = torch.tensor(grid.origin, dtype=torch.float64, device=device)
    size = torch.tensor(grid.level_voxel_size(scale), dtype=torch.float64, device=device)
    idx = torch.floor((pts[:, :3] - origin) / size).to(torch.int64)  # (N, 3) as ix, iy, iz

    dims = torch.tensor((wx, hy, dz), dtype=torch.int64, device=device)
    keep = ((idx >= 0) & (idx < dims)).all(dim=1)
    if not bool(keep.any()):
        return (
            torch.zeros((0,), dtype=torch.int64, device=device),
            torch.zeros((0, 4), dtype=torch.float64, device=device),
        )
    pts, idx, batch_idx = pts[keep], idx[keep], batch_idx[keep]

    lin = ((batch_idx * dz + idx[:, 2]) * hy + idx[:, 1]) * wx + idx[:, 0]
    uniq, inv = torch.unique(lin, return_inverse=True)

    centers = (idx.to(torch.float64) + 0.5) * size + origin
    raw = torch.cat([pts[:, :3] - centers, pts[:, 3:4]], dim=1)

    sums = torch.zeros((uniq.numel(), 4), dtype=torch.float64, device=device)
    sums.index_add_(0, inv, raw)
    counts = torch.zeros(uniq.numel(), dtype=torch.float64, device=device)
    counts.index_add_(0, inv, torch.ones_like(lin, dtype=torch.float64))
    return uniq, sums / counts.unsqueeze(1)


def dynamic_voxelize(points: torch.Tensor, grid: GridSpec, scale: int):
    """Voxelize one (N, 4) point cloud at the given pyramid scale.

    Returns (coords, feats): ``coords`` is (M, 3) int64 per occupied voxel as
    (iz, iy, ix); ``feats`` is (M, 4) float64 holding the per-voxel mean of
    (dx, dy, dz, intensity), the offsets taken from the voxel center.
    Out-of-range points are dropped. Output rows are sorted by linear voxel
    index, so they do not depend on input order.
    """
    assert points.ndim == 2 and points.shape[1] == 4, "points must be (N, 4)"
    lin, feats = _voxelize_merged(
        points, torch.zeros(len(points), dtype=torch.int64, device=points.device), grid, scale
    )
    dz, hy, wx = grid.level_shape(scale)
    iz = torch.div(lin, hy * wx, rounding_mode="floor")
    rem = lin - iz * hy * wx
    iy = torch.div(rem, wx, rounding_mode="floor")
    ix = rem - iy * wx
    return torch.stack([iz, iy, ix], dim=1), feats


class LidarVoxelEncoder(nn.Module):
    """Per-scale two-layer perceptron over dynamic-voxel mean features.

    Produces the dense LiDAR pyramid: level i has shape (B, C, D/2^i, H/2^i,
    W/2^i) with zeros in unoccupied voxels.
    """

    def __init__(self, grid: GridSpec):
        super().__init__()
        self.grid = grid
        C = grid.channels
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(4, C), nn.ReLU(), nn.Linear(C, C)) for _ in range(3)
        )

    def forward(self, points_list: list[torch.Tensor]) -> VoxelPyramid:
        dtype = self.mlps[0][0].weight.dtype
        device = self.mlps[0][0].weight.device
        B = len(points_list)
        merged = torch.cat(points_list) if points_list else torch.zeros((0, 4), device=device)
        batch_idx = torch.repeat_interleave(
            torch.arange(B, device=device),
            torch.tensor([len(p) for p in points_list], device=device),
        )
        levels = []
        for scale in range(3):
            dz, hy, wx = self.grid.level_shape(scale)
            lin, feats = _voxelize_merged(merged, batch_idx, self.grid, scale)
            dense = torch.zeros((B * dz * hy * wx, self.grid.channels), dtype=dtype, device=device)
            if lin.numel():
                dense = dense.index_copy(0, lin, self.mlps[scale](feats.to(dtype)))
            levels.append(
                dense.view(B, dz, hy, wx, self.grid.channels).permute(0, 4, 1, 2, 3).contiguous()
            )
        return VoxelPyramid(levels=tuple(levels), modality="lidar")
