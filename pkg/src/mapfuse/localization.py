"""Camera position refinement by voting position lines into a map-plane grid.

Every visible footprint corner carries a fixed-length vertical segment (a
building corner line, BCL). Its projection is slid sideways across the image;
each shifted copy pins the camera to a line on the map, and that line votes
into the accumulator with a weight equal to how close the shifted segment
passes to a detected vertical edge region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BehindCamera, FullyClipped
from .geo_core import MIN_DEPTH, CameraIntrinsics, CameraPose, project_points
from .image_features import region_centers, segment_density
from .map_model import CornerPoint, visible_corners
from .raster import clip_segments, supercover_segments


@dataclass(frozen=True)
class LocalizationConfig:
    grid_size: int = 40
    cell_size: float = 0.3
    top_k: int = 5
    peak_threshold: float = 1.5
    bcl_length: float = 15.0
    kernel_sigma: float = 10.0
    kernel_cutoff: float = 3.0
    max_err: float = 6.0
    vote_mode: str = "max"  # "max": one vote per BCL per cell; "sum": every line adds

    def __post_init__(self):
        if self.grid_size < 3 or self.cell_size <= 0:
            raise ValueError("bad accumulator geometry")
        if self.top_k < 1 or self.peak_threshold < 0:
            raise ValueError("bad peak settings")
        if self.bcl_length <= 0 or self.kernel_sigma <= 0 or self.kernel_cutoff <= 0 or self.max_err <= 0:
            raise ValueError("lengths must be positive")
        if self.vote_mode not in ("max", "sum"):
            raise ValueError("vote_mode must be 'max' or 'sum'")


@dataclass(frozen=True)
class BCL:
    corner: CornerPoint
    base_elev: float
    top_elev: float

    @classmethod
    def at(cls, corner: CornerPoint, length: float = 15.0) -> "BCL":
        return cls(corner, corner.ground_elev, corner.ground_elev + length)

    @property
    def base(self) -> np.ndarray:
        return np.array([self.corner.x, self.corner.y, self.base_elev])

    @property
    def top(self) -> np.ndarray:
        return np.array([self.corner.x, self.corner.y, self.top_elev])


@dataclass(frozen=True, eq=False)
class ProjectedBCL:
    base_uv: np.ndarray  # unclipped
    top_uv: np.ndarray
    clip_a: np.ndarray  # visible part inside the image
    clip_b: np.ndarray

    @property
    def column(self) -> float:
        return float(self.base_uv[0])

    @property
    def pixel_height(self) -> float:
        return float(np.hypot(*(self.base_uv - self.top_uv)))


def project_bcl(bcl: BCL, intr: CameraIntrinsics, pose: CameraPose) -> ProjectedBCL:
    uv, depth = project_points(np.stack([bcl.base, bcl.top]), intr, pose)
    if np.any(depth <= MIN_DEPTH):
        raise BehindCamera("BCL endpoint behind the camera")
    keep, q0, q1 = clip_segments(uv[0], uv[1], 0.0, 0.0, float(intr.width), float(intr.height))
    if not keep[0]:
        raise FullyClipped("BCL projects outside the image")
    return ProjectedBCL(uv[0], uv[1], q0[0], q1[0])


def sweep_range(distance: float, fx: float, max_err: float = 6.0, width: int | None = None) -> int:
    """Half-width (columns) of the sideways sweep; inversely proportional to distance."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    r = math.ceil(fx * max_err / distance - 1e-9)
    return min(r, width) if width is not None else r


@dataclass(eq=False)
class Accumulator:
    """Vote grid; ``values[iy, ix]`` covers ``[x0 + ix*cell, ...)`` x ``[y0 + iy*cell, ...)``."""

    values: np.ndarray
    center: np.ndarray
    cell_size: float

    @classmethod
    def centered(cls, center_xy, grid_size: int = 40, cell_size: float = 0.3) -> "Accumulator":
        return cls(np.zeros((grid_size, grid_size)), np.asarray(center_xy, dtype=float)[:2].copy(), float(cell_size))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def origin(self) -> np.ndarray:
        return self.center - 0.5 * self.size * self.cell_size

    def to_grid(self, xy) -> np.ndarray:
        return (np.asarray(xy, dtype=float) - self.origin) / self.cell_size

    def cell_of(self, xy) -> tuple:
        g = np.floor(self.to_grid(xy)).astype(int)
        return int(g[0]), int(g[1])

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.origin + (np.array([ix, iy], dtype=float) + 0.5) * self.cell_size

    def to_csv(self) -> str:
        # north row first, matching a map view
        rows = [",".join(f"{v:.6f}" for v in row) for row in self.values[::-1]]
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class CandidatePosition:
    x: float
    y: float
    peak_value: float
    cell: tuple


def _line_cells(acc: Accumulator, anchors, directions):
    """Cells of the accumulator crossed by the camera-side half lines ``anchor - t*dir``."""
    n = acc.size
    a = acc.to_grid(anchors)
    reach = np.hypot(*(a - n / 2.0).T) + n * 2.0
    b = a - directions * reach[:, None]
    keep, q0, q1 = clip_segments(a, b, 0.0, 0.0, float(n), float(n))
    ids = np.nonzero(keep)[0]
    seg, ix, iy = supercover_segments(q0[ids], q1[ids])
    inside = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
    return ids[seg[inside]], ix[inside], iy[inside]


def bcl_votes(bcl: BCL, centers, intr: CameraIntrinsics, pose: CameraPose, cfg: LocalizationConfig = LocalizationConfig()):
    """Weights and planar half-line directions for every sideways shift of one BCL.

    Returns ``(offsets, weights, directions)`` with directions normalized.
    Shifts whose weight is zero are dropped.
    """
    proj = project_bcl(bcl, intr, pose)
    dist = float(np.hypot(*(bcl.base[:2] - pose.position[:2])))
    r = sweep_range(max(dist, 1e-6), intr.fx, cfg.max_err, intr.width)
    offsets = np.arange(-r, r + 1, dtype=float)
    shift = np.stack([offsets, np.zeros_like(offsets)], axis=1)
    w = segment_density(centers, proj.clip_a + shift, proj.clip_b + shift, cfg.kernel_sigma, cfg.kernel_cutoff)
    nz = w > 0
    offsets, w = offsets[nz], w[nz]
    pix = np.stack([proj.base_uv[0] + offsets, np.full(len(offsets), proj.base_uv[1]), np.ones(len(offsets))], axis=1)
    rays = pix @ intr.K_inv.T @ pose.rotation  # rows are R^T K^-1 p
    d2 = rays[:, :2]
    norm = np.hypot(d2[:, 0], d2[:, 1])
    ok = norm > 1e-12
    return offsets[ok], w[ok], d2[ok] / norm[ok, None]


def vote(
    acc: Accumulator,
    bcls,
    regions,
    intr: CameraIntrinsics,
    rotation,
    initial_position,
    cfg: LocalizationConfig = LocalizationConfig(),
) -> Accumulator:
    """Add every BCL's weighted position lines to ``acc`` (in place) and return it.

    With ``vote_mode="max"`` each BCL adds, per cell, the largest weight among
    its lines crossing that cell; with ``"sum"`` every line adds its weight.
    BCLs are processed in list order, so the result is reproducible.
    """
    pose = CameraPose(rotation, initial_position)
    centers = regions if isinstance(regions, np.ndarray) else region_centers(regions)
    if len(centers) == 0:
        return acc
    for bcl in bcls:
        try:
            _, w, dirs = bcl_votes(bcl, centers, intr, pose, cfg)
        except (BehindCamera, FullyClipped):
            continue
        if len(w) == 0:
            continue
        anchors = np.broadcast_to(bcl.base[:2], dirs.shape)
        seg, ix, iy = _line_cells(acc, anchors, dirs)
        if cfg.vote_mode == "sum":
            np.add.at(acc.values, (iy, ix), w[seg])
        else:
            # the shifted copies of one BCL are competing hypotheses, so a cell
            # keeps only the best of them; otherwise cells near the corner, where
            # the whole fan of lines converges, collect spurious mass
            best = np.zeros_like(acc.values)
            np.maximum.at(best, (iy, ix), w[seg])
            acc.values += best
    return acc


def top_peaks(acc: Accumulator, k: int = 5, threshold: float = 1.5) -> list[CandidatePosition]:
    """Up to ``k`` strongest 3x3 local maxima at or above ``threshold``, never in touching cells."""
    v = acc.values
    local = ndimage.maximum_filter(v, size=3, mode="constant", cval=-np.inf)
    cand = np.nonzero((v >= local) & (v >= threshold) & (v > 0))
    if len(cand[0]) == 0:
        return []
    vals = v[cand]
    order = np.lexsort((cand[1], cand[0], -vals))
    chosen = []
    for idx in order:
        iy, ix = int(cand[0][idx]), int(cand[1][idx])
        if any(abs(iy - cy) <= 1 and abs(ix - cx) <= 1 for cy, cx in chosen):
            continue
        chosen.append((iy, ix))
        if len(chosen) == k:
            break
    out = []
    for iy, ix in chosen:
        x, y = acc.cell_center(ix, iy)
        out.append(CandidatePosition(float(x), float(y), float(v[iy, ix]), (ix, iy)))
    return out


def bcls_for_corners(corners, cfg: LocalizationConfig = LocalizationConfig()) -> list[BCL]:
    return [BCL.at(c, cfg.bcl_length) for c in corners]


def localize(scene, regions, intr: CameraIntrinsics, pose: CameraPose, cfg: LocalizationConfig = LocalizationConfig(), max_range: float = 60.0):
    """Vote with the corners visible from ``pose``; returns ``(accumulator, candidates)``."""
    corners = visible_corners(scene, intr, pose, max_range)
    acc = Accumulator.centered(pose.position[:2], cfg.grid_size, cfg.cell_size)
    vote(acc, bcls_for_corners(corners, cfg), regions, intr, pose.rotation, pose.position, cfg)
    return acc, top_peaks(acc, cfg.top_k, cfg.peak_threshold)


def refine_position(candidates, initial_position):
    """Best candidate as ``(x, y, z)``, or the initial position when there is none.

    Returns ``(position, fallback)``.
    """
    p = np.asarray(initial_position, dtype=float).copy()
    if not candidates:
        return p, True
    p[0], p[1] = candidates[0].x, candidates[0].y
    return p, False
