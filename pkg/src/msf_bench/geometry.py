"""Rigid-body math, LiDAR-to-image projection and oriented box overlap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import CalibrationSet, ObjectLabel

MIN_POLYGON_AREA = 1e-12  # m^2, clipped polygons below this count as no overlap


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    @property
    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` applied after ``other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(roll: float = 0.0, pitch: float = 0.0, yaw: float = 0.0) -> np.ndarray:
    """Rotation matrix ``Rz(yaw) @ Ry(pitch) @ Rx(roll)`` from angles in degrees.

    Roll is about x, pitch about y, yaw about z.
    """
    r, p, y = np.deg2rad([roll, pitch, yaw])
    return _rz(y) @ _ry(p) @ _rx(r)


def apply_transform(points: np.ndarray, transform: RigidTransform) -> np.ndarray:
    """Map each ``(x, y, z)`` to ``R p + t``; intensity and dtype are kept."""
    pts = np.asarray(points)
    out = pts.copy()
    xyz = pts[:, :3].astype(np.float64)
    out[:, :3] = xyz @ transform.rotation.T + transform.translation
    return out


def lidar_to_rect(points: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    """LiDAR ``xyz`` to rectified camera coordinates, ``R0_rect @ Tr_velo_to_cam``."""
    xyz = np.asarray(points)[:, :3].astype(np.float64)
    cam = xyz @ calib.velo_rotation.T + calib.velo_translation
    return cam @ calib.R0_rect.T


def project_to_image(points: np.ndarray, calib: CalibrationSet, return_mask: bool = False):
    """Project LiDAR points through ``P2 @ R0_rect @ Tr_velo_to_cam``.

    Returns an ``(M, 3)`` array of ``(u, v, depth)`` with depth the rectified
    camera z in meters. Points at or behind the camera plane are dropped; with
    ``return_mask`` the boolean mask of kept input points is returned as well.
    """
    rect = lidar_to_rect(points, calib)
    hom = np.hstack([rect, np.ones((len(rect), 1))]) @ calib.P2.T
    keep = (rect[:, 2] > 0) & (hom[:, 2] > 0)
    uv = hom[keep, :2] / hom[keep, 2:3]
    out = np.hstack([uv, rect[keep, 2:3]])
    if return_mask:
        return out, keep
    return out


# -- boxes --------------------------------------------------------------------


def box_footprint(label: ObjectLabel) -> np.ndarray:
    """Ground-plane corners ``(x, z)`` of a KITTI camera-frame box, counter-clockwise."""
    h, w, l = label.dims
    x, _, z = label.location
    ry = label.rotation_y
    local = np.array([[l / 2, w / 2], [l / 2, -w / 2], [-l / 2, -w / 2], [-l / 2, w / 2]])
    c, s = np.cos(ry), np.sin(ry)
    # rotation about camera y acting on (x, z): x' = c x + s z, z' = -s x + c z
    rot = np.array([[c, s], [-s, c]])
    corners = local @ rot.T + np.array([x, z])
    if _signed_area(corners) < 0:
        corners = corners[::-1]
    return corners


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex polygon ``clip`` (either winding)."""
    if _signed_area(clip) < 0:
        clip = clip[::-1]
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        prev_side = side(prev)
        for cur in inp:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def _check_dims(label: ObjectLabel) -> None:
    if min(label.dims) <= 0:
        raise ValueError(f"box dimensions must be positive, got {label.dims} for {label.type}")


def box_iou_3d(a: ObjectLabel, b: ObjectLabel) -> float:
    """Volume IOU of two yaw-oriented KITTI boxes.

    Ground-plane overlap comes from clipping one footprint by the other; the
    vertical overlap uses KITTI's convention that ``location`` is the bottom
    center and camera y points down.
    """
    _check_dims(a)
    _check_dims(b)
    if (a.dims, a.location, a.rotation_y) == (b.dims, b.location, b.rotation_y):
        return 1.0
    ha, hb = a.dims[0], b.dims[0]
    top = max(a.location[1] - ha, b.location[1] - hb)
    bottom = min(a.location[1], b.location[1])
    vertical = bottom - top
    if vertical <= 0:
        return 0.0
    area = polygon_area(clip_convex_polygon(box_footprint(a), box_footprint(b)))
    if area < MIN_POLYGON_AREA:
        return 0.0
    inter = area * vertical
    vol_a = a.dims[0] * a.dims[1] * a.dims[2]
    vol_b = b.dims[0] * b.dims[1] * b.dims[2]
    return float(min(1.0, max(0.0, inter / (vol_a + vol_b - inter))))


def box_iou_2d(a, b) -> float:
    """IOU of axis-aligned ``(left, top, right, bottom)`` rectangles."""
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)
