"""Pinhole cameras, Plücker ray maps, spline trajectories and noise warping.

Conventions used throughout the package:

* poses are world-to-camera, ``x_cam = R @ x_world + t``;
* camera axes follow OpenCV (x right, y down, z forward), so world "up" is -y;
* pixel ``(u, v)`` (column, row) has its center at ``(u + 0.5, v + 0.5)``;
* arrays are row-major ``H x W x C``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng
from .errors import ArgumentError, GeometryError, ValidationError

WORLD_UP = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image extents must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float = 60.0) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(float(f), float(f), width / 2, height / 2, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        w, h = int(round(self.width * factor)), int(round(self.height * factor))
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor, w, h)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0):
            raise ValidationError("rotation is not orthonormal (R^T R != I within 1e-6)")
        det = np.linalg.det(R)
        if abs(det - 1.0) > 1e-6:
            raise ValidationError(f"rotation determinant is {det:.6f}, expected +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, R, center) -> "Pose":
        R = np.asarray(R, dtype=np.float64)
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))


def look_at(center, target, up=WORLD_UP) -> Pose:
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise GeometryError("look_at: camera center coincides with the target")
    forward /= norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis; any perpendicular works
        right = np.cross(forward, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose.from_center(R, center)


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    return np.meshgrid(u, v)


def camera_rays(intr: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin (3,) and unit directions (H, W, 3) of every pixel ray."""
    uu, vv = pixel_centers(intr.width, intr.height)
    dirs_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.R  # row-vector form of R^T d
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return pose.center, dirs


def plucker_map(intr: Intrinsics, pose: Pose) -> np.ndarray:
    """H x W x 6 map: unit world direction ``d`` then moment ``o x d``."""
    origin, dirs = camera_rays(intr, pose)
    moment = np.cross(np.broadcast_to(origin, dirs.shape), dirs)
    return np.concatenate([dirs, moment], axis=-1)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform taking camera-``a`` coordinates to camera-``b`` coordinates."""
    Rab = b.R @ a.R.T
    return Pose(Rab, b.t - Rab @ a.t)


# ---------------------------------------------------------------- trajectories

def catmull_rom(points: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Uniform Catmull-Rom curve through every control point.

    ``ts`` runs from 0 (first point) to ``len(points) - 1`` (last point); the
    end tangents use reflected phantom points.
    """
    pts = np.asarray(points, dtype=np.float64)
    ext = np.concatenate([2 * pts[:1] - pts[1:2], pts, 2 * pts[-1:] - pts[-2:-1]])
    ts = np.asarray(ts, dtype=np.float64)
    seg = np.clip(np.floor(ts).astype(int), 0, len(pts) - 2)
    s = (ts - seg)[:, None]
    p0, p1, p2, p3 = ext[seg], ext[seg + 1], ext[seg + 2], ext[seg + 3]
    return 0.5 * (2 * p1 + (-p0 + p2) * s + (2 * p0 - 5 * p1 + 4 * p2 - p3) * s ** 2
                  + (-p0 + 3 * p1 - 3 * p2 + p3) * s ** 3)


def sample_ball(rng: Rng, n: int, radius: float) -> np.ndarray:
    direction = rng.normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
    return direction * r[:, None]


def sample_spline_trajectory(anchor: Pose, n: int, scale: float, rng: Rng,
                             target=(0.0, 0.0, 0.0), controls: np.ndarray | None = None) -> list:
    """``n`` look-at poses along a Catmull-Rom spline near ``anchor``.

    Four control points are drawn uniformly from the ball of radius ``scale``
    around the anchor's camera center unless ``controls`` overrides them.
    """
    if n < 1:
        raise ArgumentError("trajectory needs at least one pose")
    if scale <= 0:
        raise ArgumentError("trajectory scale must be positive")
    if controls is None:
        controls = anchor.center + sample_ball(rng, 4, scale)
    ts = np.linspace(0.0, len(controls) - 1.0, n) if n > 1 else np.zeros(1)
    positions = catmull_rom(controls, ts)
    return [look_at(p, target) for p in positions]


# ---------------------------------------------------------------- noise warping

@dataclass(frozen=True)
class NoiseWarpConfig:
    alpha: float = 0.5
    plane_depth: float = 4.0
    renormalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.plane_depth > 0:
            raise ValidationError(f"plane_depth must be positive, got {self.plane_depth}")


def plane_homography(pose1: Pose, pose2: Pose, intr: Intrinsics, depth: float) -> np.ndarray:
    """Homography from view-2 pixels to view-1 pixels through the plane z1 = depth.

    The plane is fronto-parallel to camera 1. Raises ``GeometryError`` when the
    plane does not lie in front of camera 2.
    """
    rel = relative_pose(pose2, pose1)  # camera-2 coords -> camera-1 coords
    n1 = np.array([0.0, 0.0, 1.0])
    n2 = rel.R.T @ n1
    d2 = depth - n1 @ rel.t
    if d2 <= 1e-9:
        raise GeometryError(f"warp plane at depth {depth} lies behind the second camera")
    K = intr.matrix()
    return K @ (rel.R + np.outer(rel.t, n2) / d2) @ np.linalg.inv(K)


def warp_noise(n1: np.ndarray, pose1: Pose, pose2: Pose, intr: Intrinsics,
               cfg: NoiseWarpConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Transport view-1 noise into view 2; blend fresh noise where it does not land.

    Returns the view-2 noise (H, W, C) and the overlap mask (H, W).
    """
    n1 = np.asarray(n1)
    H, W = n1.shape[:2]
    if (H, W) != (intr.height, intr.width):
        raise ArgumentError(f"noise extent {H}x{W} does not match intrinsics {intr.height}x{intr.width}")
    Hm = plane_homography(pose1, pose2, intr, cfg.plane_depth)
    uu, vv = pixel_centers(W, H)
    pts = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ Hm.T
    w = pts[..., 2]
    front = w > 1e-12
    safe_w = np.where(front, w, 1.0)
    x = pts[..., 0] / safe_w
    y = pts[..., 1] / safe_w
    # nearest pixel whose center is closest: floor of the continuous coordinate
    col = np.floor(x)
    row = np.floor(y)
    overlap = front & (col >= 0) & (col < W) & (row >= 0) & (row < H)
    col_i = np.where(front, np.clip(col, 0, W - 1), np.arange(W)[None, :]).astype(np.intp)
    row_i = np.where(front, np.clip(row, 0, H - 1), np.arange(H)[:, None]).astype(np.intp)
    sampled = n1[row_i, col_i]

    out = sampled.copy()
    miss = ~overlap
    if miss.any():
        fresh = rng.normal(n1.shape, dtype=np.float64).astype(n1.dtype, copy=False)
        a = cfg.alpha
        blended = a * sampled + (1.0 - a) * fresh
        if cfg.renormalize:
            blended = blended / np.sqrt(a * a + (1.0 - a) ** 2)
        out[miss] = blended[miss]
    return out, overlap
