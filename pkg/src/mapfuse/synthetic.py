"""Procedural street scenes with known heights and poses, plus a ray-cast renderer.

The renderer intersects one viewing ray per pixel center with every prism
surface and keeps the nearest hit, so it shares no code with the painter's
algorithm in :mod:`mapfuse.facade_render` and can serve as its oracle.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PlacementFailure
from .geo_core import CameraIntrinsics, CameraPose, project_points, rotation_from_heading
from .map_model import Footprint, MapScene

IMAGE_WIDTH = 905
IMAGE_HEIGHT = 640
MAST_HEIGHT = 2.5
SKY = (150, 190, 235)
GROUND = (95, 95, 100)
LIGHT = np.array([0.55, -0.83])


def default_intrinsics(fx: float = 500.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx, fx, IMAGE_WIDTH / 2.0, IMAGE_HEIGHT / 2.0, IMAGE_WIDTH, IMAGE_HEIGHT)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_buildings: int = 12
    width_range: tuple = (8.0, 20.0)  # along the street
    depth_range: tuple = (8.0, 16.0)
    height_range: tuple = (6.0, 30.0)
    street_width: float = 16.0
    setback_range: tuple = (0.5, 2.5)
    gap_range: tuple = (1.0, 5.0)
    rotation_jitter_deg: float = 4.0
    back_row_prob: float = 0.3
    n_cameras: int = 2
    camera_spacing: float = 12.0
    heading_jitter_deg: float = 8.0
    mast_height: float = MAST_HEIGHT
    ground_elev_range: tuple = (0.0, 0.0)
    hard: bool = False
    n_occluders: int = 0
    gain_range: tuple = (1.0, 1.0)
    noise_sigma: float = 0.0
    max_tries: int = 200


def hard_spec(seed: int, **kw) -> SceneSpec:
    """Low-contrast palette, occluder stripes, lighting gain and sensor noise."""
    base = dict(
        seed=seed,
        hard=True,
        n_occluders=3,
        gain_range=(0.7, 1.3),
        noise_sigma=2.0,
    )
    base.update(kw)
    return SceneSpec(**base)


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    map: MapScene
    heights: dict
    poses: list
    intrinsics: CameraIntrinsics
    colors: dict
    gains: list = field(default_factory=list)


def _rect(cx, cy, w, d, angle):
    """CCW rectangle, ``w`` along +Y and ``d`` along +X before rotation."""
    hw, hd = w / 2.0, d / 2.0
    pts = np.array([[-hd, -hw], [hd, -hw], [hd, hw], [-hd, hw]])
    c, s = math.cos(angle), math.sin(angle)
    return pts @ np.array([[c, s], [-s, c]]) + [cx, cy]


def _overlap(a, b, pad=0.5) -> bool:
    """Separating-axis test for two convex CCW polygons, with a clearance pad."""
    for poly in (a, b):
        e = np.roll(poly, -1, axis=0) - poly
        for nx, ny in np.stack([e[:, 1], -e[:, 0]], axis=1):
            n = math.hypot(nx, ny)
            nx, ny = nx / n, ny / n
            pa = a @ [nx, ny]
            pb = b @ [nx, ny]
            if pa.max() + pad <= pb.min() or pb.max() + pad <= pa.min():
                return False
    return True


def _palette(rng, n, hard):
    sky_h, sky_l, sky_s = colorsys.rgb_to_hls(*(c / 255.0 for c in SKY))
    colors = []
    spread = 30.0
    draws = 0
    while len(colors) < n:
        if hard:
            h = (sky_h + rng.uniform(-0.12, 0.12)) % 1.0
            l = sky_l + rng.uniform(-0.3, -0.1)
            s = sky_s * rng.uniform(0.3, 0.9)
        else:
            h = rng.uniform(0.0, 1.0)
            l = rng.uniform(0.25, 0.55)
            s = rng.uniform(0.35, 0.8)
        rgb = np.array(colorsys.hls_to_rgb(h, l, s)) * 255.0
        draws += 1
        if draws % 200 == 0:
            spread *= 0.8
        # keep buildings distinguishable from each other and from the sky
        if all(np.abs(rgb - c).max() > spread for c in colors) and np.abs(rgb - SKY).max() > (25 if hard else 60):
            colors.append(rgb)
    return colors


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Buildings along both sides of a north-running street, cameras on the street facing north."""
    rng = np.random.default_rng(spec.seed)
    ground = float(rng.uniform(*spec.ground_elev_range))
    half_street = spec.street_width / 2.0
    polys = []
    for attempt in range(spec.max_tries):
        polys = []
        for side in (-1, 1):
            y = rng.uniform(-6.0, 4.0)
            count = (spec.n_buildings + (1 if side > 0 else 0)) // 2
            for _ in range(count):
                w = rng.uniform(*spec.width_range)
                d = rng.uniform(*spec.depth_range)
                setback = rng.uniform(*spec.setback_range)
                ang = math.radians(rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg))
                cx = side * (half_street + setback + d / 2.0 + 1.0)
                poly = _rect(cx, y + w / 2.0, w, d, ang)
                polys.append(poly)
                if rng.uniform() < spec.back_row_prob:
                    d2 = rng.uniform(*spec.depth_range)
                    cx2 = side * (abs(cx) + d / 2.0 + rng.uniform(3.0, 6.0) + d2 / 2.0)
                    polys.append(_rect(cx2, y + w / 2.0 + rng.uniform(-3, 3), rng.uniform(*spec.width_range), d2, ang))
                y += w + rng.uniform(*spec.gap_range)
        bad = any(_overlap(polys[i], polys[j]) for i in range(len(polys)) for j in range(i + 1, len(polys)))
        if not bad:
            break
    else:
        raise PlacementFailure(f"could not place non-overlapping footprints after {spec.max_tries} tries")
    footprints = [Footprint(f"b{k:03d}", p, ground) for k, p in enumerate(polys)]
    lo, hi = spec.height_range
    heights = {}
    for fp in footprints:
        h = rng.uniform(lo, hi)
        if abs(np.mean(fp.ring[:, 0])) > half_street + spec.depth_range[1] + 3.0:
            h = rng.uniform(0.5 * (lo + hi), hi)  # back row tends to be taller
        heights[fp.id] = round(float(h) / 0.2) * 0.2
    colors = {fp.id: c for fp, c in zip(footprints, _palette(rng, len(footprints), spec.hard))}
    poses = []
    for i in range(spec.n_cameras):
        x = rng.uniform(-2.0, 2.0)
        y = -14.0 + i * spec.camera_spacing + rng.uniform(-2.0, 2.0)
        heading = rng.uniform(-spec.heading_jitter_deg, spec.heading_jitter_deg)
        R = rotation_from_heading(heading)
        poses.append(CameraPose(R, np.array([x, y, ground + spec.mast_height])))
    gains = [float(rng.uniform(*spec.gain_range)) for _ in poses]
    return SyntheticScene(spec, MapScene.build(footprints), heights, poses, default_intrinsics(), colors, gains)


def perturb_position(pose: CameraPose, radius: float, seed) -> CameraPose:
    """Planar offset drawn uniformly from a disc; z and rotation untouched."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return pose
    rng = np.random.default_rng(seed)
    r = radius * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2.0 * math.pi)
    C = pose.position
    return pose.with_position_xy(C[0] + r * math.cos(a), C[1] + r * math.sin(a))


def _pixel_rays(intr: CameraIntrinsics, pose: CameraPose):
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
    return pix @ intr.K_inv.T @ pose.rotation


def _inside_polygon(px, py, ring):
    inside = np.zeros(px.shape, bool)
    a = ring
    b = np.roll(ring, -1, axis=0)
    for (ax, ay), (bx, by) in zip(a, b):
        cross = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= cross & (px < xint)
    return inside


def render_truth(scene: MapScene, heights: dict, intr: CameraIntrinsics, pose: CameraPose, include_roofs: bool = True):
    """Nearest-surface ray cast. Returns ``(labels, depth, normals_dot_light, is_ground)``.

    ``labels`` is 1 + footprint index (0 for sky and ground); ``depth`` is the
    ray parameter (camera-frame Z) of the nearest hit.
    """
    rays = _pixel_rays(intr, pose)
    C = pose.position
    n = len(rays)
    best = np.full(n, np.inf)
    label = np.zeros(n, np.int32)
    shade = np.zeros(n)
    dx, dy, dz = rays[:, 0], rays[:, 1], rays[:, 2]
    for k, fp in enumerate(scene.footprints):
        h = heights.get(fp.id)
        if h is None:
            continue
        g = fp.ground_elev
        a, b = fp.edges
        for (ax, ay), (bx, by) in zip(a, b):
            ex, ey = bx - ax, by - ay
            denom = dx * ey - dy * ex
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((ax - C[0]) * ey - (ay - C[1]) * ex) / denom
                s = ((ax - C[0]) * dy - (ay - C[1]) * dx) / denom
            z = C[2] + t * dz
            hit = (t > 0) & (s >= 0) & (s <= 1) & (z >= g) & (z <= g + h) & (t < best)
            best = np.where(hit, t, best)
            label = np.where(hit, k + 1, label)
            nrm = np.array([ey, -ex]) / math.hypot(ex, ey)
            shade = np.where(hit, float(nrm @ LIGHT), shade)
        if include_roofs:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (g + h - C[2]) / dz
            cand = (t > 0) & (t < best)
            if cand.any():
                idx = np.nonzero(cand)[0]
                px = C[0] + t[idx] * dx[idx]
                py = C[1] + t[idx] * dy[idx]
                ins = _inside_polygon(px, py, fp.ring)
                idx = idx[ins]
                best[idx] = t[idx]
                label[idx] = k + 1
                shade[idx] = 1.2
    shape = (intr.height, intr.width)
    ground_t = np.where(dz < 0, (scene.footprints[0].ground_elev - C[2]) / np.where(dz < 0, dz, -1), np.inf)
    is_ground = (label == 0) & np.isfinite(ground_t) & (ground_t > 0)
    return label.reshape(shape), best.reshape(shape), shade.reshape(shape), is_ground.reshape(shape)


def render_scene(
    scene: MapScene,
    heights: dict,
    intr: CameraIntrinsics,
    pose: CameraPose,
    colors: dict,
    gain: float = 1.0,
    occluders: int = 0,
    noise_sigma: float = 0.0,
    seed: int = 0,
):
    """Flat-shaded RGB render (uint8, ``height x width x 3``)."""
    labels, _, shade, is_ground = render_truth(scene, heights, intr, pose)
    img = np.empty(labels.shape + (3,))
    img[:] = SKY
    img[is_ground] = GROUND
    ids = [fp.id for fp in scene.footprints]
    for k, bid in enumerate(ids):
        m = labels == k + 1
        if not m.any():
            continue
        base = np.asarray(colors.get(bid, (128, 128, 128)), dtype=float)
        f = np.clip(0.7 + 0.3 * shade[m], 0.3, 1.1)
        img[m] = base[None, :] * f[:, None]
    rng = np.random.default_rng(seed)
    H, W = labels.shape
    for _ in range(occluders):
        # tree-like stripe rising from the bottom of the frame
        w = int(rng.integers(12, 40))
        u0 = int(rng.integers(0, W - w))
        top = int(rng.integers(int(0.45 * H), int(0.7 * H)))
        img[top:, u0 : u0 + w] = (40 + rng.uniform(0, 30), 90 + rng.uniform(0, 40), 40)
    img *= gain
    if noise_sigma > 0:
        img += rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def render_view(synth: SyntheticScene, index: int):
    spec = synth.spec
    return render_scene(
        synth.map,
        synth.heights,
        synth.intrinsics,
        synth.poses[index],
        synth.colors,
        synth.gains[index] if synth.gains else 1.0,
        spec.n_occluders,
        spec.noise_sigma,
        seed=spec.seed * 1000 + index,
    )


def truth_mask(synth: SyntheticScene, index: int) -> np.ndarray:
    return render_truth(synth.map, synth.heights, synth.intrinsics, synth.poses[index])[0]


def roofline_visibility(synth: SyntheticScene, index: int, building_id: str, edges, labels=None) -> float:
    """Fraction of roofline samples that separate this building (below) from something else (above).

    ``edges`` are the building's visible map edges from the true pose.
    """
    if labels is None:
        labels = truth_mask(synth, index)
    k = [fp.id for fp in synth.map.footprints].index(building_id) + 1
    h = synth.heights[building_id]
    pose = synth.poses[index]
    intr = synth.intrinsics
    total = good = 0
    for e in edges:
        if e.building_id != building_id:
            continue
        n = max(2, int(np.hypot(*(e.p1 - e.p0)) * 4))
        t = np.linspace(0.05, 0.95, n)
        xy = e.p0 + t[:, None] * (e.p1 - e.p0)
        P = np.column_stack([xy, np.full(n, e.ground_elev + h)])
        uv, depth = project_points(P, intr, pose)
        for (u, v), dpt in zip(uv, depth):
            total += 1
            if dpt <= 0:
                continue
            iu, iv = int(math.floor(u)), int(math.floor(v))
            if not (0 <= iu < intr.width and 2 <= iv < intr.height - 2):
                continue
            if labels[iv + 2, iu] == k and labels[iv - 2, iu] != k:
                good += 1
    return good / total if total else 0.0


def unobstructed_roofline(
    synth: SyntheticScene, index: int, building_id: str, edges, labels=None, min_visibility: float = 0.9, min_pixels: float = 40.0
) -> bool:
    """True when the building's roofline is both clear of occlusion and long enough in the image to be measured."""
    if roofline_visibility(synth, index, building_id, edges, labels) < min_visibility:
        return False
    h = synth.heights[building_id]
    length = 0.0
    for e in edges:
        if e.building_id != building_id:
            continue
        P = np.array([[*e.p0, e.ground_elev + h], [*e.p1, e.ground_elev + h]])
        uv, depth = project_points(P, synth.intrinsics, synth.poses[index])
        if (depth > 0).all():
            length += float(np.hypot(*(uv[1] - uv[0])))
    return length >= min_pixels
