"""7-DOF box geometry: corners, pinhole projection, containment and IoU.

Boxes rotate about the gravity (z) axis only, so 3D IoU factors into a
rotated bird's-eye-view polygon intersection times a vertical interval
overlap. A seeded Monte-Carlo estimator serves as the independent oracle
for the exact IoU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Containment tolerance: corners reconstructed through a rotation round-trip
# land within ~1e-15 of the face, so the closed interval needs a hair of slack.
_CONTAIN_EPS = 1e-9


class AllBehindCamera(Exception):
    """Every box corner has non-positive depth; the sample must be dropped."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float(np.mod(theta + np.pi, 2.0 * np.pi) - np.pi)


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (m), size (w, d, h in m), yaw about +z in [-pi, pi)."""

    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        size = np.asarray(self.size, dtype=float).reshape(3)
        if not np.all(size > 0):
            raise ValueError(f"box size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel rectangle; max corner >= min corner componentwise."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(2)
        hi = np.asarray(self.hi, dtype=float).reshape(2)
        if not np.all(hi >= lo):
            raise ValueError(f"degenerate 2D box: lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def area(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def clipped(self, width: float, height: float) -> "Box2D":
        bound = np.array([width, height], dtype=float)
        return Box2D(np.clip(self.lo, 0.0, bound), np.clip(self.hi, 0.0, bound))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: world-to-camera rotation/translation plus intrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(repr=False)
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("camera intrinsics must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=float).reshape(3)
        )

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates of camera-frame points (caller checks depth > 0)."""
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        return np.stack(
            [self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1
        )


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about +z taking box-local coordinates to world offsets."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Bottom face counter-clockwise (viewed from +z), then the top face in the
# same order; the corner centroid is the box center.
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=float,
)


def corners_of_box3d(box: Box3D) -> np.ndarray:
    """The 8 vertices, shape (8, 3)."""
    offsets = _CORNER_SIGNS * (box.size / 2.0)
    return box.center + offsets @ yaw_rotation(box.yaw).T


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Indices of points inside the box (closed intervals, boundary counts)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    local = (points - box.center) @ yaw_rotation(box.yaw)  # == R^T applied to rows
    inside = np.all(np.abs(local) <= box.size / 2.0 + _CONTAIN_EPS, axis=1)
    return np.nonzero(inside)[0]


def project_box_to_2d(box: Box3D, cam: CameraModel) -> Box2D:
    """Bounding rectangle of the projected corners, clipped to the image.

    Corners behind the camera are ignored; if none are in front,
    AllBehindCamera is raised and the caller must drop the sample.
    """
    corners = corners_of_box3d(box)
    cam_pts = cam.world_to_camera(corners)
    front = cam_pts[:, 2] > 0.0
    if not np.any(front):
        raise AllBehindCamera("all 8 corners have non-positive depth")
    z = cam_pts[front, 2]
    u = cam.fx * cam_pts[front, 0] / z + cam.cx
    v = cam.fy * cam_pts[front, 1] / z + cam.cy
    lo = np.array([u.min(), v.min()])
    hi = np.array([u.max(), v.max()])
    return Box2D(lo, hi).clipped(cam.width, cam.height)


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Standard axis-aligned rectangle IoU."""
    wh = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
    if np.any(wh <= 0):
        return 0.0
    inter = float(np.prod(wh))
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def bev_corners(box: Box3D) -> np.ndarray:
    """The 4 bird's-eye-view (x, y) corners, counter-clockwise."""
    return corners_of_box3d(box)[:4, :2]


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman step: keep the part of `subject` left of edge a->b."""
    if len(subject) == 0:
        return subject
    edge = b - a
    # signed area of (edge, point - a); >= 0 means inside for a CCW clip polygon
    side = np.array([edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) for p in subject])
    out = []
    n = len(subject)
    for i in range(n):
        j = (i + 1) % n
        p, q = subject[i], subject[j]
        sp, sq = side[i], side[j]
        if sp >= 0.0:
            out.append(p)
        if (sp > 0.0 and sq < 0.0) or (sp < 0.0 and sq > 0.0):
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.empty((0, 2))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Area of the convex intersection of the two BEV rectangles."""
    poly = bev_corners(a)
    clip = bev_corners(b)
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if len(poly) == 0:
            return 0.0
    return _polygon_area(poly)


def _box_sort_key(box: Box3D):
    return (*box.center.tolist(), *box.size.tolist(), box.yaw)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated-BEV polygon intersection times vertical overlap, over the union."""
    # canonical operand order makes the clipping arithmetic, and therefore the
    # result, exactly symmetric in (a, b)
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    z_lo = max(a.center[2] - a.size[2] / 2.0, b.center[2] - b.size[2] / 2.0)
    z_hi = min(a.center[2] + a.size[2] / 2.0, b.center[2] + b.size[2] / 2.0)
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d_oracle_mc(a: Box3D, b: Box3D, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Rejection-sampling IoU estimate over the union's bounding volume.

    Deterministic given the seed; intended as an independent check on iou_3d.
    """
    if n_samples < 100_000:
        raise ValueError("need at least 1e5 samples for a usable estimate")
    corners = np.vstack([corners_of_box3d(a), corners_of_box3d(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))

    def _inside(box: Box3D) -> np.ndarray:
        local = (pts - box.center) @ yaw_rotation(box.yaw)
        return np.all(np.abs(local) <= box.size / 2.0, axis=1)

    in_a = _inside(a)
    in_b = _inside(b)
    n_union = int(np.count_nonzero(in_a | in_b))
    if n_union == 0:
        return 0.0
    n_inter = int(np.count_nonzero(in_a & in_b))
    return n_inter / n_union
