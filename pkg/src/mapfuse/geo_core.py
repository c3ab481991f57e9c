"""Camera model and planar camera-position geometry.

Conventions used everywhere in the package:

* World frame (``LocalFrame``): X east, Y north, Z up, meters.
* ``CameraPose.rotation`` maps world vectors into the camera frame
  (world -> camera). The camera looks along +Z of its own frame, +X is
  image-right and +Y is image-down.
* Pixel coordinates are continuous with the origin at the top-left corner
  of the image; pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` so its
  center sits at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateDirection, NonFinite, ParallelLines

MIN_DEPTH = 1e-6
PARALLEL_EPS = 1e-9
DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class LocalFrame:
    """Planar metric frame; world coordinates are offsets from the origin."""

    origin_easting: float = 0.0
    origin_northing: float = 0.0

    def to_local(self, easting, northing):
        return np.asarray(easting, float) - self.origin_easting, np.asarray(northing, float) - self.origin_northing

    def to_global(self, x, y):
        return np.asarray(x, float) + self.origin_easting, np.asarray(y, float) + self.origin_northing


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise NonFinite("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def contains(self, u, v) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        C = np.asarray(self.position, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(C))):
            raise NonFinite("pose must be finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "position", C)

    def with_position_xy(self, x: float, y: float) -> "CameraPose":
        return CameraPose(self.rotation, np.array([x, y, self.position[2]]))

    @property
    def forward(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.rotation[2].copy()


@dataclass(frozen=True, eq=False)
class PositionLine2D:
    """Planar line ``anchor + t * direction`` of candidate camera positions."""

    anchor: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.anchor, dtype=float).reshape(2)
        d = np.asarray(self.direction, dtype=float).reshape(2)
        n = math.hypot(d[0], d[1])
        if n < DEGENERATE_EPS:
            raise DegenerateDirection("line direction has zero length")
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "direction", d / n)

    def distance_to(self, point) -> float:
        p = np.asarray(point, dtype=float)[:2] - self.anchor
        return abs(p[0] * self.direction[1] - p[1] * self.direction[0])


@dataclass(frozen=True)
class FovWedge:
    """Planar field-of-view sector. Bearings are unit vectors in the XY plane."""

    apex: tuple
    left: tuple
    right: tuple
    radius: float

    @property
    def half_angle(self) -> float:
        cosang = float(np.clip(np.dot(self.left, self.right), -1.0, 1.0))
        return 0.5 * math.acos(cosang)

    def contains(self, points) -> np.ndarray:
        """Vectorized membership test for an ``(N, 2)`` array of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = pts - np.asarray(self.apex)
        lx, ly = self.left
        rx, ry = self.right
        # inside means clockwise of the left ray and counter-clockwise of the right ray
        cross_left = lx * d[:, 1] - ly * d[:, 0]
        cross_right = rx * d[:, 1] - ry * d[:, 0]
        r2 = d[:, 0] ** 2 + d[:, 1] ** 2
        return (cross_left <= 0) & (cross_right >= 0) & (r2 <= self.radius**2)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite("non-finite input")


def project_points(points, intr: CameraIntrinsics, pose: CameraPose):
    """Project an ``(N, 3)`` array; returns ``(uv (N, 2), depth (N,))`` without depth checks."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    cam = (P - pose.position) @ pose.rotation.T
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / depth + intr.cx
        v = intr.fy * cam[:, 1] / depth + intr.cy
    return np.stack([u, v], axis=1), depth


def project_point(P, intr: CameraIntrinsics, pose: CameraPose):
    """Pinhole projection ``lambda * p = K R (P - C)``.

    Returns ``((u, v), depth)`` where depth is the camera-frame Z coordinate.
    """
    P = np.asarray(P, dtype=float).reshape(3)
    _check_finite(P)
    uv, depth = project_points(P[None], intr, pose)
    if not depth[0] > MIN_DEPTH:
        raise BehindCamera(f"point depth {depth[0]:.3g} m is not in front of the camera")
    return uv[0], float(depth[0])


def pixel_ray(p, intr: CameraIntrinsics, rotation) -> np.ndarray:
    """World-frame direction of the viewing ray through pixel ``p``."""
    u, v = float(p[0]), float(p[1])
    return np.asarray(rotation).T @ (intr.K_inv @ np.array([u, v, 1.0]))


def backproject_line(p, intr: CameraIntrinsics, rotation, P) -> PositionLine2D:
    """Planar line of camera positions that see world point ``P`` at pixel ``p``.

    All camera centers ``P + t * R^T K^-1 p`` reproduce the correspondence;
    dropping Z leaves a line in the map plane.
    """
    P = np.asarray(P, dtype=float).reshape(3)
    _check_finite(P, np.asarray(p, dtype=float))
    d = pixel_ray(p, intr, rotation)
    n = math.hypot(d[0], d[1])
    if n < DEGENERATE_EPS:
        raise DegenerateDirection("viewing ray is vertical in the world frame")
    return PositionLine2D(P[:2], d[:2] / n)


def intersect_lines(a: PositionLine2D, b: PositionLine2D) -> np.ndarray:
    cross = a.direction[0] * b.direction[1] - a.direction[1] * b.direction[0]
    if abs(cross) <= PARALLEL_EPS:
        raise ParallelLines("lines are parallel")
    diff = b.anchor - a.anchor
    s = (diff[0] * b.direction[1] - diff[1] * b.direction[0]) / cross
    return a.anchor + s * a.direction


def field_of_view_wedge(intr: CameraIntrinsics, pose: CameraPose, max_range: float) -> FovWedge:
    """Map-plane sector seen by the camera, bounded by the left/right image borders."""
    bearings = []
    for u in (0.0, float(intr.width)):
        d = pixel_ray((u, intr.cy), intr, pose.rotation)
        n = math.hypot(d[0], d[1])
        if n < DEGENERATE_EPS:
            raise DegenerateDirection("image border ray is vertical")
        bearings.append((d[0] / n, d[1] / n))
    apex = (float(pose.position[0]), float(pose.position[1]))
    return FovWedge(apex, bearings[0], bearings[1], float(max_range))


def rotation_from_heading(heading_deg: float, pitch_deg: float = 0.0, roll_deg: float = 0.0) -> np.ndarray:
    """World->camera rotation from compass angles.

    ``heading_deg`` is clockwise from north, ``pitch_deg`` positive tilts the
    optical axis up, ``roll_deg`` rotates the image clockwise about the axis.
    """
    psi, th, phi = (math.radians(a) for a in (heading_deg, pitch_deg, roll_deg))
    level = np.array(
        [
            [math.cos(psi), -math.sin(psi), 0.0],
            [0.0, 0.0, -1.0],
            [math.sin(psi), math.cos(psi), 0.0],
        ]
    )
    pitch = np.array(
        [[1.0, 0.0, 0.0], [0.0, math.cos(th), math.sin(th)], [0.0, -math.sin(th), math.cos(th)]]
    )
    roll = np.array(
        [[math.cos(phi), math.sin(phi), 0.0], [-math.sin(phi), math.cos(phi), 0.0], [0.0, 0.0, 1.0]]
    )
    return roll @ pitch @ level


@dataclass(frozen=True)
class CameraRecord:
    """Per-image camera metadata as stored in ``cameras/*.json``."""

    image: str
    intrinsics: CameraIntrinsics
    pose: CameraPose = field(compare=False)

    @classmethod
    def from_json(cls, obj: dict, width: int, height: int) -> "CameraRecord":
        try:
            rot = np.asarray(obj["rotation"], dtype=float)
            if rot.size != 9:
                raise ValueError("rotation must have 9 entries")
            intr = CameraIntrinsics(
                float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]), int(width), int(height)
            )
            pose = CameraPose(rot.reshape(3, 3), np.array([obj["x_m"], obj["y_m"], obj["z_m"]], dtype=float))
        except KeyError as exc:
            raise ValueError(f"camera record missing key {exc}") from None
        return cls(str(obj["image"]), intr, pose)

    def to_json(self) -> dict:
        C = self.pose.position
        return {
            "image": self.image,
            "x_m": float(C[0]),
            "y_m": float(C[1]),
            "z_m": float(C[2]),
            "rotation": [float(x) for x in self.pose.rotation.reshape(-1)],
            "fx": self.intrinsics.fx,
            "fy": self.intrinsics.fy,
            "cx": self.intrinsics.cx,
            "cy": self.intrinsics.cy,
        }
