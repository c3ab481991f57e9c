"""Prism extrusion, painter's-algorithm facade masks and OBJ export."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, NonPositiveHeight, ParseError
from .geo_core import CameraIntrinsics, CameraPose
from .map_model import Footprint, normalize_ring
from .raster import fill_polygon

NEAR_PLANE = 1e-3


@dataclass(frozen=True, eq=False)
class BuildingModel:
    """Flat-roofed prism. Vertices are the footprint ring at ground level, then at roof level."""

    building_id: str
    ring: np.ndarray
    ground_elev: float
    height: float

    def __post_init__(self):
        if not np.isfinite(self.height) or self.height <= 0:
            raise NonPositiveHeight(f"{self.building_id}: height must be positive, got {self.height}")
        ring = normalize_ring(self.ring)
        ring.setflags(write=False)
        object.__setattr__(self, "ring", ring)

    @property
    def n(self) -> int:
        return len(self.ring)

    @property
    def vertices(self) -> np.ndarray:
        base = np.column_stack([self.ring, np.full(self.n, self.ground_elev)])
        top = np.column_stack([self.ring, np.full(self.n, self.ground_elev + self.height)])
        return np.vstack([base, top])

    @property
    def quads(self) -> list[tuple]:
        """Facade index quads, counter-clockwise seen from outside."""
        n = self.n
        return [(i, (i + 1) % n, n + (i + 1) % n, n + i) for i in range(n)]

    @property
    def roof(self) -> tuple:
        return tuple(range(self.n, 2 * self.n))

    def faces(self, include_roof: bool = True) -> list[tuple]:
        return self.quads + ([self.roof] if include_roof else [])


def extrude(footprint: Footprint, ground_elev: float | None = None, height: float = 0.0) -> BuildingModel:
    g = footprint.ground_elev if ground_elev is None else float(ground_elev)
    return BuildingModel(footprint.id, footprint.ring, g, float(height))


def _face_normal(poly: np.ndarray) -> np.ndarray:
    # Newell's method; robust for planar polygons of any vertex count
    nx = ny = nz = 0.0
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        nx += (a[1] - b[1]) * (a[2] + b[2])
        ny += (a[2] - b[2]) * (a[0] + b[0])
        nz += (a[0] - b[0]) * (a[1] + b[1])
    return np.array([nx, ny, nz])


def clip_near(poly_cam: np.ndarray, near: float = NEAR_PLANE) -> np.ndarray:
    """Clip a camera-frame polygon to ``z >= near``."""
    out = []
    n = len(poly_cam)
    for i in range(n):
        a, b = poly_cam[i], poly_cam[(i + 1) % n]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            out.append(a)
        if ina != inb:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class FacadeMask:
    """Label image (0 = background) with its label -> building id table."""

    labels: np.ndarray
    table: dict

    def __post_init__(self):
        present = {int(v) for v in np.unique(self.labels)} - {0}
        missing = present - set(self.table)
        if missing:
            raise ValueError(f"labels {sorted(missing)} have no building id")

    @property
    def shape(self):
        return self.labels.shape

    def id_image(self, ids: list) -> np.ndarray:
        """Labels re-indexed into ``ids`` (1-based); buildings absent from ``ids`` map to -1."""
        pos = {b: k + 1 for k, b in enumerate(ids)}
        lut = np.zeros(max(self.table, default=0) + 1, np.int64)
        for lab, bid in self.table.items():
            lut[lab] = pos.get(bid, -1)
        return lut[self.labels]

    def to_png_bytes(self) -> bytes:
        """Indexed-palette PNG when labels fit in 8 bits, 16-bit grayscale otherwise."""
        buf = io.BytesIO()
        if self.labels.max(initial=0) <= 255:
            im = Image.fromarray(self.labels.astype(np.uint8), mode="P")
            im.putpalette(_palette())
        else:
            im = Image.fromarray(self.labels.astype(np.uint16))
        im.save(buf, format="PNG")
        return buf.getvalue()

    def table_json(self) -> str:
        return json.dumps({"labels": {str(k): v for k, v in sorted(self.table.items())}}, indent=1, sort_keys=True) + "\n"

    def save(self, png_path, json_path=None):
        from pathlib import Path

        png_path = Path(png_path)
        png_path.write_bytes(self.to_png_bytes())
        json_path = png_path.with_suffix(".json") if json_path is None else Path(json_path)
        json_path.write_text(self.table_json())

    @classmethod
    def load(cls, png_path, json_path=None) -> "FacadeMask":
        from pathlib import Path

        png_path = Path(png_path)
        json_path = png_path.with_suffix(".json") if json_path is None else Path(json_path)
        with Image.open(png_path) as im:
            labels = np.array(im).astype(np.int32)
        try:
            raw = json.loads(json_path.read_text())["labels"]
            table = {int(k): str(v) for k, v in raw.items()}
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad label table {json_path}: {exc}") from exc
        return cls(labels, table)


def _palette() -> list[int]:
    rng = np.random.default_rng(7)
    pal = rng.integers(40, 256, size=(256, 3))
    pal[0] = 0
    return [int(v) for v in pal.ravel()]


def render_masks(models, intr: CameraIntrinsics, pose: CameraPose, include_roofs: bool = True) -> FacadeMask:
    """Painter's algorithm: fill faces far to near so nearer ones overwrite.

    Labels are 1-based positions in ``models``. Back faces are culled and
    faces crossing the camera plane are clipped at ``NEAR_PLANE`` depth.
    """
    H, W = intr.height, intr.width
    labels = np.zeros((H, W), np.int32)
    R, C = pose.rotation, pose.position
    faces = []
    for k, m in enumerate(models):
        V = m.vertices
        for f_idx, face in enumerate(m.faces(include_roofs)):
            poly = V[list(face)]
            if _face_normal(poly) @ (C - poly[0]) <= 0:
                continue  # facing away from the camera
            d = float(np.linalg.norm(poly.mean(axis=0) - C))
            faces.append((-d, k, f_idx, poly))
    faces.sort(key=lambda t: (t[0], t[1], t[2]))
    for _, k, _, poly in faces:
        cam = (poly - C) @ R.T
        if np.all(cam[:, 2] < NEAR_PLANE):
            continue
        cam = clip_near(cam)
        if len(cam) < 3:
            continue
        uv = np.column_stack([intr.fx * cam[:, 0] / cam[:, 2] + intr.cx, intr.fy * cam[:, 1] / cam[:, 2] + intr.cy])
        rr, cc = fill_polygon(uv, W, H)
        labels[rr, cc] = k + 1
    table = {k + 1: m.building_id for k, m in enumerate(models)}
    used = set(np.unique(labels).tolist()) - {0}
    return FacadeMask(labels, {k: v for k, v in table.items() if k in used})


def mask_accuracy(predicted: FacadeMask, truth: FacadeMask) -> float:
    """Fraction of truth building pixels whose predicted building id matches."""
    if predicted.shape != truth.shape:
        raise DimensionMismatch(f"mask shapes differ: {predicted.shape} vs {truth.shape}")
    ids = sorted(set(truth.table.values()) | set(predicted.table.values()))
    t = truth.id_image(ids)
    p = predicted.id_image(ids)
    building = t > 0
    n = int(building.sum())
    if n == 0:
        return 1.0 if not (p > 0).any() else 0.0
    return float(np.count_nonzero(building & (p == t)) / n)


def export_obj(models) -> str:
    """Wavefront OBJ with one named object per building, millimetre precision."""
    lines = ["# flat-roofed building prisms, local metric frame"]
    offset = 1
    for m in models:
        lines.append(f"o {m.building_id}")
        for x, y, z in m.vertices:
            lines.append(f"v {x:.3f} {y:.3f} {z:.3f}")
        for face in m.faces():
            lines.append("f " + " ".join(str(offset + i) for i in face))
        offset += 2 * m.n
    return "\n".join(lines) + "\n"


def parse_obj(text: str) -> list[BuildingModel]:
    """Inverse of :func:`export_obj` for prism files it wrote."""
    objects = []
    verts = []
    for ln, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "o":
                objects.append((parts[1], len(verts)))
            elif parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError(f"line {ln}: vertex needs three coordinates")
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] in ("f", "s", "g", "usemtl", "mtllib"):
                continue
            else:
                raise ParseError(f"line {ln}: unsupported record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ParseError(f"line {ln}: {exc}") from exc
    verts = np.array(verts).reshape(-1, 3)
    models = []
    for k, (name, start) in enumerate(objects):
        end = objects[k + 1][1] if k + 1 < len(objects) else len(verts)
        V = verts[start:end]
        if len(V) < 6 or len(V) % 2:
            raise ParseError(f"object {name}: expected 2n prism vertices, got {len(V)}")
        n = len(V) // 2
        models.append(BuildingModel(name, V[:n, :2], float(V[0, 2]), float(V[n, 2] - V[0, 2])))
    return models
