"""Branch-shared BEV encoder, center-heatmap detection head, loss and decoding.

One encoder/head instance serves both the fusion branch and the camera branch
(hybrid supervision): parameter sharing is by object identity. Heatmap
supervision uses a quality-focal formulation against splatted Gaussian
targets, so the loss is zero exactly at the target; regression is L1 at
ground-truth center cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import group_norm
from .config import GridSpec
from .geometry import Box3D, bev_corners

FOCAL_GAMMA = 2.0
REG_CHANNELS = 6  # dx, dy, z, log l, log w, log h


@dataclass
class ResponseMap:
    """Detector response: class heatmaps in (0, 1) and regression maps."""

    heatmaps: torch.Tensor  # (B, K, Hb, Wb)
    regression: torch.Tensor  # (B, 6, Hb, Wb)

    def detach(self) -> "ResponseMap":
        return ResponseMap(self.heatmaps.detach(), self.regression.detach())


class ResidualBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.n1 = group_norm(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        self.n2 = group_norm(c)

    def forward(self, x):
        out = self.n2(self.conv2(F.relu(self.n1(self.conv1(x)))))
        return F.relu(out + x)


class BEVEncoder(nn.Module):
    """Stack of residual 2D conv blocks over the BEV plane."""

    def __init__(self, c_in: int, c_en: int, n_blocks: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(c_in, c_en, 3, padding=1), group_norm(c_en), nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(*[ResidualBlock(c_en) for _ in range(n_blocks)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.stem(x))


class CenterHead(nn.Module):
    """Per-class center heatmaps plus box regression."""

    def __init__(self, c_en: int, n_classes: int):
        super().__init__()
        self.trunk = nn.Sequential(nn.Conv2d(c_en, c_en, 3, padding=1), nn.ReLU(inplace=True))
        self.heat = nn.Conv2d(c_en, n_classes, 1)
        self.reg = nn.Conv2d(c_en, REG_CHANNELS, 1)
        # bias so initial heatmaps sit near a 0.1 foreground prior
        nn.init.constant_(self.heat.bias, -math.log((1.0 - 0.1) / 0.1))

    def forward(self, f_en: torch.Tensor) -> ResponseMap:
        t = self.trunk(f_en)
        return ResponseMap(heatmaps=torch.sigmoid(self.heat(t)), regression=self.reg(t))


# ---------------------------------------------------------------------------
# Targets


def gaussian_radius_cells(box: Box3D, grid: GridSpec) -> int:
    cw, ch = grid.bev_cell
    corners = bev_corners(box)
    ext_x = (corners[:, 0].max() - corners[:, 0].min()) / cw
    ext_y = (corners[:, 1].max() - corners[:, 1].min()) / ch
    return max(1, int(round(min(ext_x, ext_y) / 2.0)))


def center_cell(box: Box3D, grid: GridSpec) -> tuple[int, int]:
    """(row, col) of the BEV cell containing the box center."""
    cw, ch = grid.bev_cell
    ox, oy, _ = grid.origin
    return (
        int(math.floor((box.center[1] - oy) / ch)),
        int(math.floor((box.center[0] - ox) / cw)),
    )


def build_targets(boxes: list[Box3D], grid: GridSpec, n_classes: int):
    """Gaussian heatmap target (K, Hb, Wb), regression target (6, Hb, Wb), center mask."""
    hb, wb = grid.bev_shape
    cw, ch = grid.bev_cell
    ox, oy, _ = grid.origin
    heat = np.zeros((n_classes, hb, wb), dtype=np.float64)
    reg = np.zeros((REG_CHANNELS, hb, wb), dtype=np.float64)
    mask = np.zeros((hb, wb), dtype=bool)

    for box in boxes:
        row, col = center_cell(box, grid)
        if not (0 <= row < hb and 0 <= col < wb):
            continue
        r = gaussian_radius_cells(box, grid)
        sigma = (2.0 * r + 1.0) / 6.0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                y, x = row + dy, col + dx
                if 0 <= y < hb and 0 <= x < wb:
                    val = math.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
                    if val > heat[box.class_id, y, x]:
                        heat[box.class_id, y, x] = val
        mask[row, col] = True
        reg[0, row, col] = box.center[0] - (ox + (col + 0.5) * cw)
        reg[1, row, col] = box.center[1] - (oy + (row + 0.5) * ch)
        reg[2, row, col] = box.center[2]
        reg[3:6, row, col] = np.log(box.size)
    return heat, reg, mask


# ---------------------------------------------------------------------------
# Loss


def _quality_focal(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Focal-style cross entropy against soft targets; zero exactly at the target."""
    ce = -(torch.xlogy(target, pred) + torch.xlogy(1.0 - target, 1.0 - pred))
    return (target - pred).abs().pow(FOCAL_GAMMA) * ce


def build_targets_batch(boxes_batch, grid: GridSpec, n_classes: int):
    return [build_targets(boxes, grid, n_classes) for boxes in boxes_batch]


def detection_loss(resp: ResponseMap, boxes_batch, grid: GridSpec, targets=None) -> torch.Tensor:
    """Heatmap + regression loss, averaged over the batch.

    ``boxes_batch`` is one box list per batch element. Empty scenes contribute
    only the background heatmap term. ``targets`` may carry precomputed
    ``build_targets_batch`` output for the same boxes.
    """
    if boxes_batch and isinstance(boxes_batch[0], Box3D):
        boxes_batch = [boxes_batch]
    B, K = resp.heatmaps.shape[:2]
    assert len(boxes_batch) == B, "one box list per batch element"
    dtype = resp.heatmaps.dtype
    device = resp.heatmaps.device
    if targets is None:
        targets = build_targets_batch(boxes_batch, grid, K)

    total = resp.heatmaps.new_zeros(())
    for b, boxes in enumerate(boxes_batch):
        heat_t, reg_t, mask = targets[b]
        heat_t = torch.as_tensor(heat_t, dtype=dtype, device=device)
        norm = max(len(boxes), 1)
        heat_loss = _quality_focal(resp.heatmaps[b], heat_t).sum() / norm
        if mask.any():
            m = torch.as_tensor(mask, device=device)
            reg_t = torch.as_tensor(reg_t, dtype=dtype, device=device)
            diff = (resp.regression[b] - reg_t).abs() * m
            reg_loss = diff.sum() / norm
        else:
            reg_loss = resp.heatmaps.new_zeros(())
        total = total + heat_loss + reg_loss
    return total / B


# ---------------------------------------------------------------------------
# Decoding


def decode(
    resp: ResponseMap,
    grid: GridSpec,
    score_thresh: float = 0.05,
    max_dets: int = 16,
) -> list[list[tuple[Box3D, float]]]:
    """Peak-pick the response into boxes, per batch element.

    A cell is a detection if it is a 3x3 local maximum of its class heatmap
    and its score exceeds ``score_thresh``. Equal scores are broken toward the
    lower flattened (class, row, col) index.
    """
    assert 0.0 < score_thresh < 1.0
    heat = resp.heatmaps.detach()
    B, K, hb, wb = heat.shape
    pooled = F.max_pool2d(heat, kernel_size=3, stride=1, padding=1)
    peaks = (heat == pooled) & (heat > score_thresh)

    cw, ch = grid.bev_cell
    ox, oy, _ = grid.origin
    out = []
    for b in range(B):
        mask = peaks[b].reshape(-1).cpu().numpy()
        scores = heat[b].reshape(-1).cpu().numpy()
        flat = np.nonzero(mask)[0]
        if flat.size == 0:
            out.append([])
            continue
        order = np.lexsort((flat, -scores[flat]))
        flat = flat[order][:max_dets]
        reg = resp.regression[b].detach().cpu().numpy()
        dets = []
        for f in flat:
            k, rem = divmod(int(f), hb * wb)
            row, col = divmod(rem, wb)
            r = reg[:, row, col]
            cx = ox + (col + 0.5) * cw + float(r[0])
            cy = oy + (row + 0.5) * ch + float(r[1])
            box = Box3D(
                center=(cx, cy, float(r[2])),
                size=tuple(float(v) for v in np.exp(r[3:6])),
                yaw=0.0,
                class_id=k,
            )
            dets.append((box, float(scores[f])))
        out.append(dets)
    return out
