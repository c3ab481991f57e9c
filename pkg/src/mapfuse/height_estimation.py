"""Roofline scanning, multi-view height votes and joint position/height selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import groupby

import numpy as np

from .errors import EmptyProjection, NoVisibleEdges, OutOfRange
from .geo_core import CameraIntrinsics, CameraPose
from .image_features import EdgenessField, SpectralHistogramConfig, edgeness_field, line_support_regions, region_centers
from .localization import Accumulator, CandidatePosition, LocalizationConfig, bcls_for_corners, top_peaks, vote
from .map_model import MAX_RANGE, SAMPLE_SPACING, corners_from_edges, visible_edges
from .raster import clip_segments, supercover_segments

logger = logging.getLogger(__name__)

NEAR_CLIP = 1e-3


@dataclass(frozen=True)
class HeightScanConfig:
    min_height: float = 3.0
    max_height: float = 100.0
    step: float = 0.2
    low_score_threshold: float = 0.15
    normalize: bool = True
    min_polyline_pixels: int = 30

    def __post_init__(self):
        if not self.min_height < self.max_height:
            raise ValueError("min_height must be below max_height")
        if self.step <= 0 or self.low_score_threshold < 0 or self.min_polyline_pixels < 1:
            raise ValueError("bad scan settings")

    @property
    def heights(self) -> np.ndarray:
        n = int(round((self.max_height - self.min_height) / self.step)) + 1
        return self.min_height + self.step * np.arange(n)


def _project_segments(a3, b3, intr: CameraIntrinsics, pose: CameraPose):
    """Project 3D segments, clipping them at the near plane. Returns ``(keep, uv0, uv1)``."""
    R, C = pose.rotation, pose.position
    ca = (a3 - C) @ R.T
    cb = (b3 - C) @ R.T
    za, zb = ca[:, 2], cb[:, 2]
    keep = (za > NEAR_CLIP) | (zb > NEAR_CLIP)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (NEAR_CLIP - za) / (zb - za)
    cut = ca + t[:, None] * (cb - ca)
    ca = np.where((za <= NEAR_CLIP)[:, None], cut, ca)
    cb = np.where((zb <= NEAR_CLIP)[:, None], cut, cb)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv0 = np.stack([intr.fx * ca[:, 0] / ca[:, 2] + intr.cx, intr.fy * ca[:, 1] / ca[:, 2] + intr.cy], 1)
        uv1 = np.stack([intr.fx * cb[:, 0] / cb[:, 2] + intr.cx, intr.fy * cb[:, 1] / cb[:, 2] + intr.cy], 1)
    return keep, uv0, uv1


def scan_polylines(edges, elevations, field_scores, intr: CameraIntrinsics, pose: CameraPose, margin: int = 0):
    """Edgeness sums and unique-pixel counts of the projected edges at each elevation.

    ``elevations`` are absolute Z values. Returns ``(sums, counts)`` arrays
    aligned with ``elevations``.
    """
    elevations = np.asarray(elevations, dtype=float)
    K = len(elevations)
    if not edges or K == 0:
        return np.zeros(K), np.zeros(K, np.int64)
    p0 = np.array([e.p0 for e in edges], dtype=float)
    p1 = np.array([e.p1 for e in edges], dtype=float)
    E = len(edges)
    z = np.repeat(elevations, E)
    a3 = np.column_stack([np.tile(p0, (K, 1)), z])
    b3 = np.column_stack([np.tile(p1, (K, 1)), z])
    front, uv0, uv1 = _project_segments(a3, b3, intr, pose)
    H, W = field_scores.shape
    m = float(margin)
    inside, q0, q1 = clip_segments(uv0, uv1, m, m, (W - m) * (1 - 1e-12), (H - m) * (1 - 1e-12))
    ids = np.nonzero(front & inside)[0]
    seg, ix, iy = supercover_segments(q0[ids], q1[ids])
    ok = (ix >= margin) & (ix < W - margin) & (iy >= margin) & (iy < H - margin)
    k = ids[seg[ok]] // E
    key = (k * H + iy[ok]) * W + ix[ok]
    key = np.unique(key)
    k = key // (H * W)
    pix = key % (H * W)
    vals = field_scores.reshape(-1)[pix]
    sums = np.bincount(k, weights=vals, minlength=K)
    counts = np.bincount(k, minlength=K)
    return sums, counts


def polyline_score(edges, elevation: float, field: EdgenessField, intr: CameraIntrinsics, pose: CameraPose, normalize: bool = True):
    """Score of one polyline: mean (or summed) edgeness over its unique in-image pixels."""
    sums, counts = scan_polylines(edges, [elevation], field.scores, intr, pose)
    if counts[0] == 0:
        raise EmptyProjection("polyline falls outside the image")
    s = sums[0] / counts[0] if normalize else sums[0]
    return float(s), int(counts[0])


@dataclass(frozen=True, eq=False)
class HeightEstimate:
    building_id: str
    height: float | None
    score: float
    rejected: bool
    reason: str = ""
    heights: np.ndarray = field(default=None, repr=False)
    scores: np.ndarray = field(default=None, repr=False)


def estimate_height_single(building_id: str, edges, field: EdgenessField, intr: CameraIntrinsics, pose: CameraPose, cfg: HeightScanConfig = HeightScanConfig()) -> HeightEstimate:
    """Scan elevations above ground and keep the best-scoring roofline."""
    edges = [e for e in edges if e.building_id == building_id]
    if not edges:
        raise NoVisibleEdges(f"building {building_id} has no visible edges")
    ground = edges[0].ground_elev
    hs = cfg.heights
    sums, counts = scan_polylines(edges, ground + hs, field.scores, intr, pose, field.cfg.margin)
    valid = counts >= cfg.min_polyline_pixels
    scores = np.zeros(len(hs))
    if cfg.normalize:
        scores[valid] = sums[valid] / counts[valid]
    else:
        scores[valid] = sums[valid]
    if not valid.any():
        return HeightEstimate(building_id, None, 0.0, True, "empty projection", hs, scores)
    best = int(np.argmax(scores))
    score = float(scores[best])
    if score < cfg.low_score_threshold:
        return HeightEstimate(building_id, float(hs[best]), score, True, "low score", hs, scores)
    return HeightEstimate(building_id, float(hs[best]), score, False, "", hs, scores)


class HeightVoteArray:
    """Per-building one-dimensional height histogram over the scan grid."""

    def __init__(self, building_id: str, cfg: HeightScanConfig = HeightScanConfig()):
        self.building_id = building_id
        self.cfg = cfg
        self.heights = cfg.heights
        self.counts = np.zeros(len(self.heights), np.int64)
        self.best_score = 0.0
        self.n_views_seen = 0

    def bin_of(self, height: float) -> int:
        i = int(round((height - self.cfg.min_height) / self.cfg.step))
        if not (0 <= i < len(self.heights)) or height < self.cfg.min_height - 1e-9 or height > self.cfg.max_height + 1e-9:
            raise OutOfRange(f"height {height} outside [{self.cfg.min_height}, {self.cfg.max_height}]")
        return i

    def accumulate(self, est: HeightEstimate) -> "HeightVoteArray":
        self.n_views_seen += 1
        if est.rejected or est.height is None:
            return self
        self.counts[self.bin_of(est.height)] += 1
        self.best_score = max(self.best_score, est.score)
        return self

    def merge(self, other: "HeightVoteArray") -> "HeightVoteArray":
        self.counts += other.counts
        self.best_score = max(self.best_score, other.best_score)
        self.n_views_seen += other.n_views_seen
        return self

    @property
    def n_votes(self) -> int:
        return int(self.counts.sum())

    def finalize(self):
        """Height of the fullest bin (lowest height on ties); ``None`` without votes."""
        if self.n_votes == 0:
            return None
        return float(self.heights[int(np.argmax(self.counts))])


@dataclass(frozen=True)
class JointConfig:
    features: SpectralHistogramConfig = SpectralHistogramConfig()
    localization: LocalizationConfig = LocalizationConfig()
    scan: HeightScanConfig = HeightScanConfig()
    angle_tol: float = 22.5
    min_vertical_extent: int = 50
    max_horizontal_extent: int = 20
    max_range: float = MAX_RANGE
    sample_spacing: float = SAMPLE_SPACING


@dataclass(eq=False)
class CandidateResult:
    position: np.ndarray
    peak_value: float
    S: float
    estimates: dict


@dataclass(eq=False)
class JointResult:
    pose: CameraPose
    estimates: dict
    candidates: list
    chosen: int
    fallback: bool
    accumulator: Accumulator | None
    n_regions: int
    n_bcls: int

    @property
    def position(self) -> np.ndarray:
        return self.pose.position

    def diagnostics(self, include_curves: bool = False) -> dict:
        out = {
            "position": [round(float(v), 6) for v in self.pose.position],
            "fallback_to_initial": self.fallback,
            "chosen_candidate": self.chosen,
            "n_line_support_regions": self.n_regions,
            "n_bcls": self.n_bcls,
            "candidates": [
                {
                    "x": round(float(c.position[0]), 6),
                    "y": round(float(c.position[1]), 6),
                    "peak_value": round(float(c.peak_value), 6),
                    "S": round(float(c.S), 6),
                }
                for c in self.candidates
            ],
            "buildings": {},
        }
        for bid, est in sorted(self.estimates.items()):
            rec = {
                "height_m": None if est.height is None else round(est.height, 3),
                "score": round(float(est.score), 6),
                "rejected": est.rejected,
                "reason": est.reason,
            }
            if include_curves and est.scores is not None:
                rec["scan_curve"] = [round(float(s), 6) for s in est.scores]
            out["buildings"][bid] = rec
        return out


def estimate_all(scene, field: EdgenessField, intr: CameraIntrinsics, pose: CameraPose, cfg: JointConfig = JointConfig()):
    """Height estimates for every building visible from ``pose``, plus their summed score."""
    edges = visible_edges(scene, intr, pose, cfg.max_range, cfg.sample_spacing)
    estimates = {}
    for bid, group in groupby(edges, key=lambda e: e.building_id):
        estimates[bid] = estimate_height_single(bid, list(group), field, intr, pose, cfg.scan)
    S = sum(e.score for e in estimates.values() if not e.rejected)
    return estimates, float(S)


def joint_localize_estimate(
    image,
    scene,
    intr: CameraIntrinsics,
    initial_pose: CameraPose,
    cfg: JointConfig = JointConfig(),
    refine: bool = True,
    field: EdgenessField | None = None,
) -> JointResult:
    """Vote for candidate camera positions, then keep the one whose projected
    footprints best match rooflines."""
    acc = None
    n_regions = n_bcls = 0
    peaks: list[CandidatePosition] = []
    if refine:
        regions = line_support_regions(image, cfg.angle_tol, cfg.min_vertical_extent, cfg.max_horizontal_extent)
        n_regions = len(regions)
        edges0 = visible_edges(scene, intr, initial_pose, cfg.max_range, cfg.sample_spacing)
        bcls = bcls_for_corners(corners_from_edges(scene, edges0), cfg.localization)
        n_bcls = len(bcls)
        lc = cfg.localization
        acc = Accumulator.centered(initial_pose.position[:2], lc.grid_size, lc.cell_size)
        if bcls:
            vote(acc, bcls, region_centers(regions), intr, initial_pose.rotation, initial_pose.position, lc)
        peaks = top_peaks(acc, lc.top_k, lc.peak_threshold)
    fallback = not peaks
    if fallback:
        peaks = [CandidatePosition(float(initial_pose.position[0]), float(initial_pose.position[1]), 0.0, None)]
    if field is None:
        field = edgeness_field(image, cfg.features)
    results = []
    for c in peaks:
        pose = initial_pose.with_position_xy(c.x, c.y)
        estimates, S = estimate_all(scene, field, intr, pose, cfg)
        results.append(CandidateResult(pose.position, c.peak_value, S, estimates))
    # candidates arrive sorted by peak value, so the first maximum wins ties
    chosen = int(np.argmax([r.S for r in results]))
    best = results[chosen]
    return JointResult(
        initial_pose.with_position_xy(*best.position[:2]),
        best.estimates,
        results,
        chosen,
        fallback,
        acc,
        n_regions,
        n_bcls,
    )
