"""Cross-modal knowledge injection: imitation module and the three distillation losses.

The fusion branch is the online teacher: feature, relation and response
losses pull the camera branch toward it, with the fusion-side tensors
detached (by default) so no gradient leaks back into the prompter. Loss forms
follow the roles of the three stages: foreground-masked MSE on BEV features,
keypoint cosine-affinity matching on encoded features, and Gaussian-masked
MSE on responses.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import DistillWeights, GridSpec
from .detector import ResponseMap, build_targets
from .fusion import depth_major_flatten
from .geometry import Box3D, bev_corners, points_in_box

_EPS = 1e-8


class ImitationModule(nn.Module):
    """3D conv -> vertical flatten -> pointwise 2D conv, turning the scale-1
    camera voxel level into a BEV feature that can track the fusion feature.

    Kept at inference time; counted with the camera base model.
    """

    def __init__(self, grid: GridSpec):
        super().__init__()
        C = grid.channels
        D2 = grid.shape_dhw[0] // 2
        self.conv3d = nn.Conv3d(C, C, 3, padding=1)
        self.conv2d = nn.Conv2d(D2 * C, C, 1)

    def forward(self, f_c1: torch.Tensor) -> torch.Tensor:
        """(B, C, D/2, H/2, W/2) -> (B, C, H/2, W/2)."""
        return self.conv2d(depth_major_flatten(self.conv3d(f_c1)))


# ---------------------------------------------------------------------------
# Masks and sampling helpers


def foreground_bev_mask(boxes: list[Box3D], grid: GridSpec) -> np.ndarray:
    """(Hb, Wb) bool: BEV cells whose center lies inside any box footprint."""
    hb, wb = grid.bev_shape
    cw, ch = grid.bev_cell
    ox, oy, _ = grid.origin
    mask = np.zeros((hb, wb), dtype=bool)
    if not boxes:
        return mask
    xs = ox + (np.arange(wb) + 0.5) * cw
    ys = oy + (np.arange(hb) + 0.5) * ch
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx.ravel(), gy.ravel(), np.zeros(hb * wb)], axis=1)
    for box in boxes:
        flat = Box3D(
            (box.center[0], box.center[1], 0.0),
            (box.size[0], box.size[1], 1.0),
            box.yaw,
            box.class_id,
        )
        mask |= points_in_box(centers, flat).reshape(hb, wb)
    return mask


def box_keypoints_bev(boxes: list[Box3D]) -> np.ndarray:
    """(5 * n_boxes, 2) world xy: each box's BEV center followed by its 4 corners."""
    pts = []
    for box in boxes:
        pts.append(np.asarray(box.center[:2]))
        pts.extend(bev_corners(box))
    return np.stack(pts, axis=0) if pts else np.zeros((0, 2))


def bilinear_sample(fmap: torch.Tensor, xy: np.ndarray, grid: GridSpec) -> torch.Tensor:
    """Sample (C, Hb, Wb) at world xy positions; coordinates clamp to the border.

    Returns (N, C), differentiable w.r.t. ``fmap``.
    """
    C, hb, wb = fmap.shape
    cw, ch = grid.bev_cell
    ox, oy, _ = grid.origin
    u = torch.as_tensor((xy[:, 0] - ox) / cw - 0.5, dtype=fmap.dtype, device=fmap.device)
    v = torch.as_tensor((xy[:, 1] - oy) / ch - 0.5, dtype=fmap.dtype, device=fmap.device)
    u = u.clamp(0.0, wb - 1.0)
    v = v.clamp(0.0, hb - 1.0)
    x0 = u.floor().long().clamp(max=wb - 1)
    y0 = v.floor().long().clamp(max=hb - 1)
    x1 = (x0 + 1).clamp(max=wb - 1)
    y1 = (y0 + 1).clamp(max=hb - 1)
    wx = (u - x0.to(fmap.dtype)).unsqueeze(1)
    wy = (v - y0.to(fmap.dtype)).unsqueeze(1)
    flat = fmap.reshape(C, hb * wb)
    f00 = flat[:, y0 * wb + x0].T
    f01 = flat[:, y0 * wb + x1].T
    f10 = flat[:, y1 * wb + x0].T
    f11 = flat[:, y1 * wb + x1].T
    top = f00 * (1 - wx) + f01 * wx
    bot = f10 * (1 - wx) + f11 * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# The three losses (all are >= 0, and 0 iff the compared quantities agree on
# the masked support)


def _per_scene(boxes_batch, B):
    if boxes_batch and isinstance(boxes_batch[0], Box3D):
        boxes_batch = [boxes_batch]
    assert len(boxes_batch) == B
    return boxes_batch


def feature_distill(f_f: torch.Tensor, f_c: torch.Tensor, boxes_batch, grid: GridSpec):
    """Mean squared difference over foreground BEV cells, 0 with no foreground."""
    assert f_f.shape == f_c.shape
    B = f_f.shape[0]
    boxes_batch = _per_scene(boxes_batch, B)
    total = f_f.new_zeros(())
    for b, boxes in enumerate(boxes_batch):
        mask = foreground_bev_mask(boxes, grid)
        if not mask.any():
            continue
        m = torch.as_tensor(mask, device=f_f.device)
        diff = (f_f[b] - f_c[b]) ** 2  # (C, Hb, Wb)
        total = total + diff[:, m].mean()
    return total / B


def relation_distill(enc_f: torch.Tensor, enc_c: torch.Tensor, boxes_batch, grid: GridSpec):
    """Mean absolute difference between pairwise cosine-affinity matrices of
    keypoint features (box BEV center + 4 corners, bilinearly sampled)."""
    assert enc_f.shape == enc_c.shape
    B = enc_f.shape[0]
    boxes_batch = _per_scene(boxes_batch, B)
    total = enc_f.new_zeros(())
    for b, boxes in enumerate(boxes_batch):
        xy = box_keypoints_bev(boxes)
        if len(xy) < 2:
            continue
        sim_f = _cosine_matrix(bilinear_sample(enc_f[b], xy, grid))
        sim_c = _cosine_matrix(bilinear_sample(enc_c[b], xy, grid))
        total = total + (sim_f - sim_c).abs().mean()
    return total / B


def _cosine_matrix(x: torch.Tensor) -> torch.Tensor:
    n = x / x.norm(dim=1, keepdim=True).clamp(min=_EPS)
    return n @ n.T


def response_distill(resp_f: ResponseMap, resp_c: ResponseMap, boxes_batch, grid: GridSpec,
                     targets=None):
    """Gaussian-target-weighted MSE on heatmaps and regression maps."""
    assert resp_f.heatmaps.shape == resp_c.heatmaps.shape
    B, K = resp_f.heatmaps.shape[:2]
    boxes_batch = _per_scene(boxes_batch, B)
    total = resp_f.heatmaps.new_zeros(())
    for b, boxes in enumerate(boxes_batch):
        heat_t = targets[b][0] if targets is not None else build_targets(boxes, grid, K)[0]
        w = torch.as_tensor(heat_t, dtype=resp_f.heatmaps.dtype, device=resp_f.heatmaps.device)
        w_sum = w.sum()
        if float(w_sum) == 0.0:
            continue
        heat_term = (w * (resp_f.heatmaps[b] - resp_c.heatmaps[b]) ** 2).sum() / w_sum
        w_cell = w.max(dim=0).values
        reg_sq = ((resp_f.regression[b] - resp_c.regression[b]) ** 2).mean(dim=0)
        reg_term = (w_cell * reg_sq).sum() / w_cell.sum()
        total = total + heat_term + reg_term
    return total / B


def combined_distill_loss(
    f_f: torch.Tensor,
    f_c: torch.Tensor,
    enc_f: torch.Tensor,
    enc_c: torch.Tensor,
    resp_f: ResponseMap,
    resp_c: ResponseMap,
    boxes_batch,
    grid: GridSpec,
    weights: DistillWeights,
    detach_fusion: bool = True,
    targets=None,
):
    """Weighted sum of the three losses.

    With ``detach_fusion`` (the default) the fusion-side tensors are detached,
    so this loss contributes no gradient to the prompter or anything upstream
    of the fusion branch.
    """
    if detach_fusion:
        f_f = f_f.detach()
        enc_f = enc_f.detach()
        resp_f = resp_f.detach()
    parts = {
        "fea": feature_distill(f_f, f_c, boxes_batch, grid),
        "rel": relation_distill(enc_f, enc_c, boxes_batch, grid),
        "resp": response_distill(resp_f, resp_c, boxes_batch, grid, targets=targets),
    }
    total = weights.fea * parts["fea"] + weights.rel * parts["rel"] + weights.resp * parts["resp"]
    return total, parts
