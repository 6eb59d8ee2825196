"""Image backbone and depth-distribution lifting into camera pseudo-voxel pyramids.

Each view predicts a per-pixel categorical depth distribution plus context
features at 1/4 image resolution; their outer product forms a frustum point
cloud that is scatter-meaned into the scale-0 voxel grid. Coarser levels come
from strided average pooling of level 0 followed by per-scale pointwise
convolutions (those convolutions belong to the camera base model).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import group_norm
from .config import GridSpec, ModelSpec
from .pyramid import VoxelPyramid

FEATURE_STRIDE = 4


class ImageBackbone(nn.Module):
    """Four conv blocks with two stride-2 stages; head emits depth logits + context."""

    def __init__(self, c_img: int, n_depth_bins: int, c_out: int):
        super().__init__()
        self.n_depth_bins = n_depth_bins
        self.c_out = c_out
        self.blocks = nn.Sequential(
            nn.Conv2d(3, c_img, 3, stride=2, padding=1), group_norm(c_img), nn.ReLU(inplace=True),
            nn.Conv2d(c_img, c_img, 3, padding=1), group_norm(c_img), nn.ReLU(inplace=True),
            nn.Conv2d(c_img, c_img, 3, stride=2, padding=1), group_norm(c_img), nn.ReLU(inplace=True),
            nn.Conv2d(c_img, c_img, 3, padding=1), group_norm(c_img), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(c_img, n_depth_bins + c_out, 1)

    def forward(self, images: torch.Tensor):
        """images: (N, 3, h, w) -> depth probs (N, n_bins, h/4, w/4), context (N, C, h/4, w/4)."""
        out = self.head(self.blocks(images))
        depth = torch.softmax(out[:, : self.n_depth_bins], dim=1)
        context = out[:, self.n_depth_bins:]
        return depth, context


def frustum_world_points(intrinsics, cam_to_world, image_hw, depth_bins):
    """World coordinates of the frustum grid of one view.

    Returns (n_bins, hf, wf, 3) float64 for feature pixels at FEATURE_STRIDE
    spacing (pixel-patch centers) and the given depth-bin values (camera
    z-depth).
    """
    h, w = image_hw
    hf, wf = h // FEATURE_STRIDE, w // FEATURE_STRIDE
    K = torch.as_tensor(intrinsics, dtype=torch.float64)
    T = torch.as_tensor(cam_to_world, dtype=torch.float64)
    bins = torch.as_tensor(depth_bins, dtype=torch.float64)

    u = (torch.arange(wf, dtype=torch.float64) + 0.5) * FEATURE_STRIDE
    v = (torch.arange(hf, dtype=torch.float64) + 0.5) * FEATURE_STRIDE
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    dirs = torch.stack(
        [(uu - K[0, 2]) / K[0, 0], (vv - K[1, 2]) / K[1, 1], torch.ones_like(uu)], dim=-1
    )  # (hf, wf, 3) camera frame, unit z
    cam = dirs.unsqueeze(0) * bins.view(-1, 1, 1, 1)  # (n_bins, hf, wf, 3)
    world = cam @ T[:3, :3].T + T[:3, 3]
    return world


class CameraLift(nn.Module):
    """Multi-view lift producing the camera pseudo-voxel pyramid."""

    def __init__(self, grid: GridSpec, model: ModelSpec):
        super().__init__()
        self.grid = grid
        self.backbone = ImageBackbone(model.c_img, model.n_depth_bins, grid.channels)
        self.pool_convs = nn.ModuleList(
            nn.Conv3d(grid.channels, grid.channels, 1) for _ in range(2)
        )
        d0, d1 = model.depth_range
        self.register_buffer(
            "depth_bins", torch.linspace(d0, d1, model.n_depth_bins, dtype=torch.float64)
        )
        self._frustum_cache: dict[bytes, torch.Tensor] = {}

    def _frustum_cam(self, intrinsics: torch.Tensor, image_hw) -> torch.Tensor:
        """Camera-frame frustum points (P, 3) for one view, cached per intrinsics."""
        key = intrinsics.numpy().tobytes() + bytes(image_hw)
        cached = self._frustum_cache.get(key)
        if cached is None:
            identity = torch.eye(4, dtype=torch.float64)
            cached = frustum_world_points(intrinsics, identity, image_hw, self.depth_bins)
            cached = cached.reshape(-1, 3)
            self._frustum_cache[key] = cached
        return cached

    def forward(self, images, intrinsics, cam_to_world) -> VoxelPyramid:
        """images: (B, V, 3, h, w); intrinsics: (B, V, 3, 3); cam_to_world: (B, V, 4, 4)."""
        B, V, _, h, w = images.shape
        dtype = self.backbone.head.weight.dtype
        device = images.device
        depth, context = self.backbone(images.reshape(B * V, 3, h, w))
        n_bins = depth.shape[1]
        C = context.shape[1]
        hf, wf = depth.shape[-2:]

        # Frustum features: weight context by the depth distribution, then lay
        # rows out as (view, bin, pixel) to match the coordinate tensor below.
        weighted = depth.unsqueeze(2) * context.unsqueeze(1)  # (B*V, n_bins, C, hf, wf)
        feats = weighted.permute(0, 1, 3, 4, 2).reshape(B, V * n_bins * hf * wf, C)

        coords = torch.empty((B, V, n_bins * hf * wf, 3), dtype=torch.float64)
        for b in range(B):
            for v in range(V):
                cam = self._frustum_cam(intrinsics[b, v].cpu(), (h, w))
                T = cam_to_world[b, v].to(torch.float64).cpu()
                coords[b, v] = cam @ T[:3, :3].T + T[:3, 3]
        coords = coords.to(device).reshape(B, -1, 3)

        level0 = _scatter_mean(coords, feats, self.grid, dtype)
        level1 = self.pool_convs[0](F.avg_pool3d(level0, 2))
        level2 = self.pool_convs[1](F.avg_pool3d(level0, 4))
        return VoxelPyramid(levels=(level0, level1, level2), modality="camera")


def _scatter_mean(coords, feats, grid: GridSpec, dtype) -> torch.Tensor:
    """Mean-scatter (B, P, 3) world points with (B, P, C) features into the scale-0 grid.

    Sums are accumulated in float64 and cast to ``dtype`` at the end, so the
    result does not depend on the order points arrive in (e.g. view order).
    """
    B, P, C = feats.shape
    dz, hy, wx = grid.level_shape(0)
    device = feats.device
    origin = torch.tensor(grid.origin, dtype=torch.float64, device=device)
    size = torch.tensor(grid.voxel_size, dtype=torch.float64, device=device)

    idx = torch.floor((coords - origin) / size).to(torch.int64)  # (..., 3) as ix, iy, iz
    dims = torch.tensor((wx, hy, dz), dtype=torch.int64, device=device)
    keep = ((idx >= 0) & (idx < dims)).all(dim=-1)

    lin = (idx[..., 2] * hy + idx[..., 1]) * wx + idx[..., 0]
    batch_offset = torch.arange(B, device=device).unsqueeze(1) * (dz * hy * wx)
    lin = (lin + batch_offset)[keep]

    sums = torch.zeros((B * dz * hy * wx, C), dtype=torch.float64, device=device)
    sums.index_add_(0, lin, feats[keep].to(torch.float64))
    counts = torch.zeros(B * dz * hy * wx, dtype=torch.float64, device=device)
    counts.index_add_(0, lin, torch.ones(lin.shape, dtype=torch.float64, device=device))

    dense = sums / counts.clamp(min=1.0).unsqueeze(1)
    dense = dense.to(dtype).view(B, dz, hy, wx, C).permute(0, 4, 1, 2, 3)
    return dense.contiguous()
