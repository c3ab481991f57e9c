"""Building footprints, the map raster and map-side visibility queries."""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRing, ParseError
from .geo_core import CameraIntrinsics, CameraPose, field_of_view_wedge
from .raster import fill_polygon

logger = logging.getLogger(__name__)

MAP_RESOLUTION = 0.3
MAX_RANGE = 60.0
SAMPLE_SPACING = 1.0


def signed_area(ring) -> float:
    r = np.asarray(ring, dtype=float)
    x, y = r[:, 0], r[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(a0, a1, b0, b1) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a0, a1, b0), orient(a0, a1, b1)
    o3, o4 = orient(b0, b1, a0), orient(b0, b1, a1)
    return o1 * o2 < 0 and o3 * o4 < 0


def _is_simple(ring: np.ndarray) -> bool:
    n = len(ring)
    for i in range(n):
        a0, a1 = ring[i], ring[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a0, a1, ring[j], ring[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True, eq=False)
class Footprint:
    """Closed CCW building outline. ``ring`` holds distinct vertices only."""

    id: str
    ring: np.ndarray
    ground_elev: float = 0.0

    def __post_init__(self):
        ring = normalize_ring(self.ring)
        ring.setflags(write=False)
        object.__setattr__(self, "ring", ring)
        object.__setattr__(self, "ground_elev", float(self.ground_elev))

    @property
    def area(self) -> float:
        return signed_area(self.ring)

    @property
    def edges(self):
        return self.ring, np.roll(self.ring, -1, axis=0)


def normalize_ring(coords) -> np.ndarray:
    """Drop the closing vertex and consecutive duplicates, force CCW order."""
    ring = np.asarray(coords, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(ring)):
        raise DegenerateRing("ring has non-finite coordinates")
    keep = [0] + [i for i in range(1, len(ring)) if not np.array_equal(ring[i], ring[i - 1])]
    ring = ring[keep]
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(ring) < 3 or len({tuple(p) for p in ring}) < 3:
        raise DegenerateRing("footprint ring needs at least 3 distinct vertices")
    area = signed_area(ring)
    if abs(area) < 1e-12:
        raise DegenerateRing("footprint ring has zero area")
    if not _is_simple(ring):
        raise DegenerateRing("footprint ring self-intersects")
    if area < 0:
        ring = ring[::-1].copy()
    return ring


def load_geojson(data) -> list[Footprint]:
    """Parse a FeatureCollection of Polygons (outer ring only)."""
    try:
        obj = json.loads(data)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict) or obj.get("type") != "FeatureCollection":
        raise ParseError("expected a GeoJSON FeatureCollection")
    out = []
    for n, feat in enumerate(obj.get("features", [])):
        geom = (feat or {}).get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ParseError(f"feature {n}: only Polygon geometries are supported")
        props = feat.get("properties") or {}
        try:
            ring = geom["coordinates"][0]
            ring = [(float(p[0]), float(p[1])) for p in ring]
        except (KeyError, IndexError, TypeError, ValueError):
            raise ParseError(f"feature {n}: malformed coordinates") from None
        fid = props.get("id", feat.get("id", n))
        out.append(Footprint(str(fid), ring, float(props.get("ground_elev_m", 0.0) or 0.0)))
    return out


def dump_geojson(footprints) -> str:
    feats = []
    for fp in footprints:
        ring = [[round(float(x), 6), round(float(y), 6)] for x, y in fp.ring]
        ring.append(ring[0])
        feats.append(
            {
                "type": "Feature",
                "properties": {"id": fp.id, "ground_elev_m": fp.ground_elev},
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            }
        )
    return json.dumps({"type": "FeatureCollection", "features": feats}, indent=1)


def load_osm_xml(data, origin_lat=None, origin_lon=None) -> list[Footprint]:
    """Closed ``building=*`` ways from an OSM XML extract.

    Node coordinates go through a local equirectangular projection about
    ``(origin_lat, origin_lon)`` (default: the first node). Relations are
    skipped with a warning.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ParseError(f"invalid OSM XML: {exc}") from None
    nodes = {}
    for nd in root.iter("node"):
        nodes[nd.get("id")] = (float(nd.get("lat")), float(nd.get("lon")))
    if not nodes:
        return []
    if origin_lat is None or origin_lon is None:
        origin_lat, origin_lon = next(iter(nodes.values()))
    m_per_deg = 111_319.49
    coslat = math.cos(math.radians(origin_lat))

    def to_xy(ref):
        lat, lon = nodes[ref]
        return ((lon - origin_lon) * m_per_deg * coslat, (lat - origin_lat) * m_per_deg)

    out = []
    for way in root.iter("way"):
        tags = {t.get("k"): t.get("v") for t in way.iter("tag")}
        if "building" not in tags:
            continue
        refs = [nd.get("ref") for nd in way.iter("nd")]
        if len(refs) < 4 or refs[0] != refs[-1]:
            logger.warning("skipping unclosed building way %s", way.get("id"))
            continue
        try:
            ring = [to_xy(r) for r in refs]
            out.append(Footprint(str(way.get("id")), ring, float(tags.get("ele", 0.0))))
        except KeyError:
            logger.warning("skipping way %s with missing nodes", way.get("id"))
        except DegenerateRing as exc:
            logger.warning("skipping way %s: %s", way.get("id"), exc)
    for rel in root.iter("relation"):
        if any(t.get("k") == "building" for t in rel.iter("tag")):
            logger.warning("multipolygon relation %s not supported", rel.get("id"))
    return out


@dataclass(frozen=True, eq=False)
class MapRaster:
    """Occupancy grid; ``grid[iy, ix]`` covers ``x0 + ix*res`` .. and ``y0 + iy*res`` (north-up after a flip)."""

    grid: np.ndarray
    x0: float
    y0: float
    resolution: float

    def world_to_grid(self, xy):
        xy = np.asarray(xy, dtype=float)
        return np.stack([(xy[..., 0] - self.x0) / self.resolution, (xy[..., 1] - self.y0) / self.resolution], -1)

    def grid_to_world(self, ij):
        ij = np.asarray(ij, dtype=float)
        return np.stack([ij[..., 0] * self.resolution + self.x0, ij[..., 1] * self.resolution + self.y0], -1)

    def occupied(self, xy) -> np.ndarray:
        g = np.floor(self.world_to_grid(xy)).astype(np.int64)
        h, w = self.grid.shape
        ok = (g[..., 0] >= 0) & (g[..., 0] < w) & (g[..., 1] >= 0) & (g[..., 1] < h)
        out = np.zeros(ok.shape, bool)
        out[ok] = self.grid[g[..., 1][ok], g[..., 0][ok]]
        return out


def rasterize_map(footprints, resolution: float = MAP_RESOLUTION, margin: float = 0.0) -> MapRaster:
    if not footprints:
        raise ValueError("need at least one footprint")
    pts = np.concatenate([fp.ring for fp in footprints])
    lo = np.floor((pts.min(axis=0) - margin) / resolution) * resolution
    hi = np.ceil((pts.max(axis=0) + margin) / resolution) * resolution
    w = int(round((hi[0] - lo[0]) / resolution))
    h = int(round((hi[1] - lo[1]) / resolution))
    grid = np.zeros((h, w), bool)
    for fp in footprints:
        g = (fp.ring - lo) / resolution
        rr, cc = fill_polygon(g, w, h)
        grid[rr, cc] = True
    grid.setflags(write=False)
    return MapRaster(grid, float(lo[0]), float(lo[1]), float(resolution))


@dataclass(frozen=True, eq=False)
class MapScene:
    footprints: list
    raster: MapRaster
    _edge_a: np.ndarray = field(repr=False, default=None)
    _edge_b: np.ndarray = field(repr=False, default=None)
    _edge_owner: np.ndarray = field(repr=False, default=None)
    _edge_index: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls, footprints, resolution: float = MAP_RESOLUTION, margin: float = 10.0) -> "MapScene":
        footprints = list(footprints)
        ids = [fp.id for fp in footprints]
        if len(set(ids)) != len(ids):
            raise ValueError("footprint ids must be unique")
        a, b = zip(*(fp.edges for fp in footprints))
        owner = np.concatenate([np.full(len(fp.ring), k) for k, fp in enumerate(footprints)])
        index = np.concatenate([np.arange(len(fp.ring)) for fp in footprints])
        return cls(
            footprints,
            rasterize_map(footprints, resolution, margin),
            np.concatenate(a),
            np.concatenate(b),
            owner,
            index,
        )

    def by_id(self, building_id: str) -> Footprint:
        for fp in self.footprints:
            if fp.id == building_id:
                return fp
        raise KeyError(building_id)


@dataclass(frozen=True, eq=False)
class VisibleEdge:
    building_id: str
    edge_index: int
    p0: np.ndarray
    p1: np.ndarray
    t0: float
    t1: float
    distance_to_camera: float
    ground_elev: float


@dataclass(frozen=True)
class CornerPoint:
    building_id: str
    vertex_index: int
    x: float
    y: float
    ground_elev: float

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    L2 = float(ab @ ab)
    t = 0.0 if L2 == 0 else float(np.clip((p - a) @ ab / L2, 0.0, 1.0))
    return float(np.hypot(*(a + t * ab - p)))


def _blocked(cam, samples, own_edge, ea, eb, eidx):
    """For each sample, does the camera->sample segment cross any listed edge?"""
    if len(ea) == 0:
        return np.zeros(len(samples), bool)
    # stop just short of the sample so edges meeting at the sample vertex do not count
    q = samples + (cam - samples) * 1e-9
    p = np.broadcast_to(cam, q.shape)

    def orient(ax, ay, bx, by, cx, cy):
        return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)

    px, py = p[:, 0:1], p[:, 1:2]
    qx, qy = q[:, 0:1], q[:, 1:2]
    ax, ay = ea[None, :, 0], ea[None, :, 1]
    bx, by = eb[None, :, 0], eb[None, :, 1]
    o1 = orient(px, py, qx, qy, ax, ay)
    o2 = orient(px, py, qx, qy, bx, by)
    o3 = orient(ax, ay, bx, by, px, py)
    o4 = orient(ax, ay, bx, by, qx, qy)
    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    hit &= eidx[None, :] != own_edge[:, None]
    return hit.any(axis=1)


def visible_edges(
    scene: MapScene,
    intr: CameraIntrinsics,
    pose: CameraPose,
    max_range: float = MAX_RANGE,
    sample_spacing: float = SAMPLE_SPACING,
) -> list[VisibleEdge]:
    """Front-facing, unoccluded footprint (sub)edges inside the view wedge.

    Edges are sampled every ``sample_spacing`` meters; each maximal run of
    visible samples becomes one clipped sub-segment.
    """
    cam = np.asarray(pose.position[:2], dtype=float)
    wedge = field_of_view_wedge(intr, pose, max_range)
    ea, eb = scene._edge_a, scene._edge_b
    eidx = np.arange(len(ea))
    # only edges reachable by a ray of length <= max_range can occlude
    near = np.array(
        [_point_segment_distance(cam, ea[k], eb[k]) <= max_range for k in range(len(ea))]
    )
    out = []
    for k in np.nonzero(near)[0]:
        a, b = ea[k], eb[k]
        d = b - a
        length = math.hypot(d[0], d[1])
        normal = np.array([d[1], -d[0]])
        mid = 0.5 * (a + b)
        if normal @ (mid - cam) >= 0:
            continue
        n_s = max(1, math.ceil(length / sample_spacing))
        ts = np.linspace(0.0, 1.0, n_s + 1)
        samples = a + ts[:, None] * d
        ok = wedge.contains(samples)
        if ok.any():
            idx = np.nonzero(ok)[0]
            ok[idx] &= ~_blocked(cam, samples[idx], np.full(len(idx), k), ea[near], eb[near], eidx[near])
        owner = int(scene._edge_owner[k])
        fp = scene.footprints[owner]
        run_start = None
        for s in range(len(ts) + 1):
            vis = s < len(ts) and ok[s]
            if vis and run_start is None:
                run_start = s
            elif not vis and run_start is not None:
                if s - 1 > run_start:
                    t0, t1 = float(ts[run_start]), float(ts[s - 1])
                    # exact ring vertices at the ends keep corners bit-identical
                    p0 = a.copy() if t0 == 0.0 else a + t0 * d
                    p1 = b.copy() if t1 == 1.0 else a + t1 * d
                    out.append(
                        VisibleEdge(
                            fp.id,
                            int(scene._edge_index[k]),
                            p0,
                            p1,
                            t0,
                            t1,
                            _point_segment_distance(cam, p0, p1),
                            fp.ground_elev,
                        )
                    )
                run_start = None
    out.sort(key=lambda e: (e.building_id, e.edge_index, e.t0))
    return out


def corners_from_edges(scene: MapScene, edges) -> list[CornerPoint]:
    seen = {}
    for e in edges:
        fp = scene.by_id(e.building_id)
        n = len(fp.ring)
        for at_vertex, vi in ((e.t0 == 0.0, e.edge_index), (e.t1 == 1.0, (e.edge_index + 1) % n)):
            if at_vertex and (e.building_id, vi) not in seen:
                x, y = fp.ring[vi]
                seen[(e.building_id, vi)] = CornerPoint(e.building_id, int(vi), float(x), float(y), fp.ground_elev)
    return [seen[key] for key in sorted(seen)]


def visible_corners(scene, intr, pose, max_range: float = MAX_RANGE, sample_spacing: float = SAMPLE_SPACING):
    return corners_from_edges(scene, visible_edges(scene, intr, pose, max_range, sample_spacing))
