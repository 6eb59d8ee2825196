"""3D boxes, pinhole cameras and the ray-cast renderer used by the scene generator.

Conventions: world frame is x-right / y-forward / z-up; camera frame is
x-right / y-down / z-forward (depth). Box ``size`` is (length, width, height)
with length along the box x-axis at yaw 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi). Uses IEEE remainder so exact multiples of pi stay exact."""
    r = math.remainder(a, TWO_PI)
    return -math.pi if r == math.pi else r


@dataclass(frozen=True)
class Box3D:
    """Axis-oriented 3D box: center (x, y, z), size (l, w, h), yaw about +z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int

    def validate(self, xy_range=None, z_range=None) -> None:
        assert min(self.size) > 0.0, "box size components must be positive"
        assert -math.pi <= self.yaw < math.pi, "yaw must lie in [-pi, pi)"
        if xy_range is not None:
            assert xy_range[0] <= self.center[0] <= xy_range[1]
            assert xy_range[0] <= self.center[1] <= xy_range[1]
        if z_range is not None:
            assert z_range[0] <= self.center[2] <= z_range[1]


def boxes_to_array(boxes) -> np.ndarray:
    """Pack boxes into an (N, 8) float64 array: x y z l w h yaw class."""
    if not boxes:
        return np.zeros((0, 8))
    return np.array(
        [[*b.center, *b.size, b.yaw, float(b.class_id)] for b in boxes], dtype=np.float64
    )


def boxes_from_array(arr) -> list[Box3D]:
    return [
        Box3D(
            center=(float(r[0]), float(r[1]), float(r[2])),
            size=(float(r[3]), float(r[4]), float(r[5])),
            yaw=float(r[6]),
            class_id=int(round(r[7])),
        )
        for r in np.asarray(arr)
    ]


def bev_corners(box: Box3D) -> np.ndarray:
    """(4, 2) BEV footprint corners, counter-clockwise."""
    l, w, _ = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center[:2])


def points_in_box(points_xyz: np.ndarray, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the box inflated by ``margin`` on every side."""
    p = np.asarray(points_xyz, dtype=np.float64) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    qx = c * p[:, 0] + s * p[:, 1]
    qy = -s * p[:, 0] + c * p[:, 1]
    hx, hy, hz = (np.asarray(box.size) / 2.0) + margin
    return (np.abs(qx) <= hx) & (np.abs(qy) <= hy) & (np.abs(p[:, 2]) <= hz)


def bev_point_rect_distance(point_xy, box: Box3D) -> float:
    """BEV distance from a point to the box footprint (0 inside)."""
    p = np.asarray(point_xy, dtype=np.float64) - np.asarray(box.center[:2])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    q = np.array([c * p[0] + s * p[1], -s * p[0] + c * p[1]])
    half = np.asarray(box.size[:2]) / 2.0
    d = np.maximum(np.abs(q) - half, 0.0)
    return float(np.hypot(d[0], d[1]))


def bev_rects_overlap(a: Box3D, b: Box3D, margin: float = 0.0) -> bool:
    """Separating-axis test between two (inflated) BEV footprints."""
    ca = _inflate_corners(a, margin)
    cb = _inflate_corners(b, margin)
    for corners in (ca, cb):
        for i in range(2):
            edge = corners[(i + 1) % 4] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _inflate_corners(box: Box3D, margin: float) -> np.ndarray:
    l, w, h = box.size
    grown = Box3D(box.center, (l + 2 * margin, w + 2 * margin, h), box.yaw, box.class_id)
    return bev_corners(grown)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Exact BEV IoU for axis-aligned (yaw = 0) boxes; SAT fallback otherwise.

    The fallback only distinguishes overlap from no overlap, which is all the
    scene generator needs.
    """
    if a.yaw == 0.0 and b.yaw == 0.0:
        ax0, ay0 = a.center[0] - a.size[0] / 2, a.center[1] - a.size[1] / 2
        ax1, ay1 = a.center[0] + a.size[0] / 2, a.center[1] + a.size[1] / 2
        bx0, by0 = b.center[0] - b.size[0] / 2, b.center[1] - b.size[1] / 2
        bx1, by1 = b.center[0] + b.size[0] / 2, b.center[1] + b.size[1] / 2
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
        return inter / union if union > 0 else 0.0
    return 1.0 if bev_rects_overlap(a, b) else 0.0


# ---------------------------------------------------------------------------
# Cameras


_HEADINGS_4 = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))


def make_intrinsics(image_hw: tuple[int, int]) -> np.ndarray:
    """Square-pixel pinhole with 90 deg horizontal FOV and centered principal point."""
    h, w = image_hw
    f = w / 2.0
    return np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])


def camera_pose(position, forward_xy) -> np.ndarray:
    """Camera-to-world pose for a level camera looking along ``forward_xy``.

    Columns of the rotation are the camera's right / down / forward axes in
    world coordinates; built directly from the heading so axis-aligned rigs
    are exact.
    """
    fx, fy = forward_xy
    n = math.hypot(fx, fy)
    fx, fy = fx / n, fy / n
    forward = np.array([fx, fy, 0.0])
    right = np.array([fy, -fx, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = np.asarray(position, dtype=np.float64)
    return pose


def surround_rig(n_views: int, height: float, image_hw) -> list[tuple[np.ndarray, np.ndarray]]:
    """(intrinsics, cam_to_world) pairs for n outward-facing cameras at the origin."""
    K = make_intrinsics(image_hw)
    rigs = []
    for v in range(n_views):
        if n_views == 4:
            heading = _HEADINGS_4[v]  # exact axis-aligned headings
        else:
            ang = TWO_PI * v / n_views
            heading = (math.cos(ang), math.sin(ang))
        rigs.append((K.copy(), camera_pose((0.0, 0.0, height), heading)))
    return rigs


def project_points(K, cam_to_world, points_w):
    """Project world points; returns (uv (N,2), depth (N,)). Depth <= 0 means behind."""
    R = cam_to_world[:3, :3]
    t = cam_to_world[:3, 3]
    pc = (np.asarray(points_w, dtype=np.float64) - t) @ R  # R^T @ (p - t), row form
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pc[:, :2] / depth[:, None]
    uv = uv @ np.array([[K[0, 0], 0.0], [0.0, K[1, 1]]]) + np.array([K[0, 2], K[1, 2]])
    return uv, depth


def pixel_rays(K, image_hw) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with unit z, through pixel centers."""
    h, w = image_hw
    u = (np.arange(w, dtype=np.float64) + 0.5 - K[0, 2]) / K[0, 0]
    v = (np.arange(h, dtype=np.float64) + 0.5 - K[1, 2]) / K[1, 1]
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def raycast_boxes(K, cam_to_world, boxes, image_hw):
    """Ray-cast solid boxes from one camera.

    Returns (depth (H,W), hit_index (H,W)); depth is the camera z-depth of the
    nearest box surface (inf where no box is hit), hit_index the index into
    ``boxes`` (-1 for background). Because rays are parameterized with unit
    camera z, the ray parameter *is* the z-depth.
    """
    h, w = image_hw
    dirs_cam = pixel_rays(K, image_hw).reshape(-1, 3)
    R = cam_to_world[:3, :3]
    origin = cam_to_world[:3, 3]
    dirs_w = dirs_cam @ R.T

    depth = np.full(h * w, np.inf)
    hit = np.full(h * w, -1, dtype=np.int64)
    for bi, box in enumerate(boxes):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box
        o = rot @ (origin - np.asarray(box.center))
        d = dirs_w @ rot.T
        half = np.asarray(box.size) / 2.0
        t_enter = np.full(h * w, -np.inf)
        t_exit = np.full(h * w, np.inf)
        for ax in range(3):
            da = d[:, ax]
            oa = o[ax]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half[ax] - oa) / da
                t2 = (half[ax] - oa) / da
            parallel = da == 0.0
            if np.any(parallel):
                inside = abs(oa) <= half[ax]
                t1 = np.where(parallel, -np.inf if inside else np.inf, t1)
                t2 = np.where(parallel, np.inf if inside else -np.inf, t2)
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            t_enter = np.maximum(t_enter, lo)
            t_exit = np.minimum(t_exit, hi)
        ok = (t_enter <= t_exit) & (t_enter > 0.0) & (t_enter < depth)
        depth[ok] = t_enter[ok]
        hit[ok] = bi
    return depth.reshape(h, w), hit.reshape(h, w)


def class_color(class_id: int, n_classes: int) -> np.ndarray:
    """Deterministic, well separated RGB color for a class (values in [0, 1])."""
    import colorsys

    hue = class_id / max(n_classes, 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95), dtype=np.float64)
