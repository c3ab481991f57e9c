"""Dataset I/O, batch orchestration and evaluation.

A dataset directory holds::

    images/<stem>.png          RGB photos
    cameras/<stem>.json        camera metadata (initial, possibly noisy pose)
    map.geojson                building footprints in the local metric frame
    truth_heights.csv          optional: building_id,height_m
    truth_masks/<stem>.png     optional: label masks (+ .json label tables)
    truth_cameras/<stem>.json  optional: true poses

A directory whose subdirectories are datasets is treated as a suite.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PipelineConfig
from .errors import DatasetError, DimensionMismatch, MapFuseError, ParseError
from .facade_render import FacadeMask, export_obj, extrude, mask_accuracy, render_masks
from .geo_core import CameraRecord
from .height_estimation import HeightVoteArray, joint_localize_estimate
from .image_features import edgeness_debug_image, edgeness_field, line_support_regions, regions_overlay
from .localization import localize, refine_position
from .map_model import MapScene, dump_geojson, load_geojson
from .synthetic import SyntheticScene, perturb_position, render_view, truth_mask

logger = logging.getLogger(__name__)

TOLERANCES = (2.0, 3.0, 4.0)


# ---------------------------------------------------------------- dataset I/O


@dataclass(frozen=True)
class ImageRecord:
    stem: str
    path: Path
    camera: CameraRecord


@dataclass(frozen=True)
class Dataset:
    root: Path
    scene: MapScene
    images: tuple

    def truth_heights(self) -> dict | None:
        p = self.root / "truth_heights.csv"
        return read_heights_csv(p) if p.exists() else None


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def _write_png(path: Path, array: np.ndarray):
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    path.write_bytes(buf.getvalue())


def is_dataset(path) -> bool:
    return (Path(path) / "map.geojson").is_file()


def suite_members(path) -> list[Path]:
    """Dataset subdirectories of a suite directory, sorted by name."""
    root = Path(path)
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and is_dataset(p))


@lru_cache(maxsize=8)
def _load_dataset_cached(root: str, stamp) -> Dataset:
    return _load_dataset(Path(root))


def _stamp(root: Path):
    # modification times of everything the loader reads, so rewritten datasets reload
    out = []
    for sub in ("map.geojson", "images", "cameras"):
        p = root / sub
        out.append(p.stat().st_mtime_ns if p.exists() else None)
    return tuple(out)


def load_dataset(root) -> Dataset:
    root = Path(root).resolve()
    return _load_dataset_cached(str(root), _stamp(root))


def _load_dataset(root: Path) -> Dataset:
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    map_path = root / "map.geojson"
    if not map_path.is_file():
        raise DatasetError(f"{root}: missing map.geojson")
    try:
        footprints = load_geojson(map_path.read_text())
    except ParseError as exc:
        raise DatasetError(f"{map_path}: {exc}") from exc
    if not footprints:
        raise DatasetError(f"{map_path}: no building footprints")
    try:
        scene = MapScene.build(footprints)
    except ValueError as exc:
        raise DatasetError(f"{map_path}: {exc}") from exc
    image_dir = root / "images"
    paths = sorted(image_dir.glob("*.png")) if image_dir.is_dir() else []
    if not paths:
        raise DatasetError("no images")
    records = []
    for p in paths:
        cam_path = root / "cameras" / f"{p.stem}.json"
        if not cam_path.is_file():
            raise DatasetError(f"{p.name}: missing camera file {cam_path.name}")
        with Image.open(p) as im:
            width, height = im.size
        try:
            cam = CameraRecord.from_json(json.loads(cam_path.read_text()), width, height)
        except (ValueError, TypeError) as exc:
            raise DatasetError(f"{cam_path}: {exc}") from exc
        records.append(ImageRecord(p.stem, p, cam))
    return Dataset(root, scene, tuple(records))


def read_heights_csv(path) -> dict:
    """``building_id -> height`` (``None`` for empty cells)."""
    out = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h = (row.get("height_m") or "").strip()
                out[row["building_id"]] = float(h) if h else None
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"cannot read heights from {path}: {exc}") from exc
    return out


def _fmt(v: float, nd: int = 6) -> str:
    s = f"{v:.{nd}f}"
    return "0." + "0" * nd if s == "-0." + "0" * nd else s


def write_dataset(synth: SyntheticScene, root, noise_radius: float = 5.0, seed: int = 0) -> Path:
    """Emit a synthetic scene as a dataset; camera files carry perturbed positions."""
    root = Path(root)
    for sub in ("images", "cameras", "truth_masks", "truth_cameras"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "map.geojson").write_text(dump_geojson(synth.map.footprints) + "\n")
    with open(root / "truth_heights.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["building_id", "height_m"])
        for bid in sorted(synth.heights):
            w.writerow([bid, _fmt(synth.heights[bid], 3)])
    table = {k + 1: fp.id for k, fp in enumerate(synth.map.footprints)}
    for i, pose in enumerate(synth.poses):
        stem = f"img_{i:03d}"
        _write_png(root / "images" / f"{stem}.png", render_view(synth, i))
        noisy = perturb_position(pose, noise_radius, (seed, synth.spec.seed, i))
        for sub, p in (("cameras", noisy), ("truth_cameras", pose)):
            rec = CameraRecord(f"images/{stem}.png", synth.intrinsics, p)
            (root / sub / f"{stem}.json").write_text(json.dumps(rec.to_json(), indent=1) + "\n")
        labels = truth_mask(synth, i)
        used = set(np.unique(labels).tolist()) - {0}
        FacadeMask(labels, {k: v for k, v in table.items() if k in used}).save(root / "truth_masks" / f"{stem}.png")
    return root


# ---------------------------------------------------------------- per-image work


@dataclass(eq=False)
class ImageResult:
    stem: str
    initial_position: np.ndarray
    position: np.ndarray
    fallback: bool
    chosen: int
    estimates: dict
    diagnostics: dict
    accumulator: np.ndarray | None


def process_image(root: str, index: int, cfg: PipelineConfig) -> ImageResult:
    """Joint localization and height estimation for one image of a dataset."""
    ds = load_dataset(root)
    rec = ds.images[index]
    img = read_image(rec.path)
    intr, pose0 = rec.camera.intrinsics, rec.camera.pose
    if img.shape[:2] != (intr.height, intr.width):
        raise DatasetError(f"{rec.stem}: image size does not match camera metadata")
    joint = cfg.joint
    field = edgeness_field(img, joint.features)
    res = joint_localize_estimate(img, ds.scene, intr, pose0, joint, refine=cfg.refine, field=field)
    diag = res.diagnostics(include_curves=True)
    diag["image"] = rec.stem
    diag["initial_position"] = [round(float(v), 6) for v in pose0.position]
    diag["refine"] = cfg.refine
    seen = set(res.estimates)
    diag["not_visible"] = sorted(fp.id for fp in ds.scene.footprints if fp.id not in seen)
    if cfg.debug:
        _write_debug(Path(cfg.output_dir), rec.stem, img, field, joint)
    acc = None if res.accumulator is None else res.accumulator.values
    return ImageResult(rec.stem, pose0.position, res.position, res.fallback, res.chosen, res.estimates, diag, acc)


def _write_debug(out: Path, stem: str, img, field, joint):
    d = out / "diagnostics"
    d.mkdir(parents=True, exist_ok=True)
    _write_png(d / f"{stem}_edgeness.png", edgeness_debug_image(field))
    regions = line_support_regions(img, joint.angle_tol, joint.min_vertical_extent, joint.max_horizontal_extent)
    _write_png(d / f"{stem}_regions.png", regions_overlay(img, regions))


def _map_images(fn, root: str, n: int, cfg: PipelineConfig) -> list:
    # results come back in image order whatever the worker count, so every
    # downstream merge is deterministic
    if cfg.threads <= 1 or n <= 1:
        return [fn(root, i, cfg) for i in range(n)]
    with ProcessPoolExecutor(max_workers=min(cfg.threads, n)) as ex:
        return list(ex.map(fn, [root] * n, range(n), [cfg] * n))


def accumulator_png(values: np.ndarray) -> np.ndarray:
    """Heat-map RGB of an accumulator, north row first."""
    v = values[::-1]
    top = float(v.max())
    t = v / top if top > 0 else np.zeros_like(v)
    rgb = np.stack([t, np.zeros_like(t), 1.0 - t], axis=-1) * 255.0
    rgb[v <= 0] = 0
    img = np.round(rgb).astype(np.uint8)
    return np.kron(img, np.ones((8, 8, 1), np.uint8))


# ---------------------------------------------------------------- stages


def _positions_rows(items):
    rows = [["image", "x_m", "y_m", "z_m", "initial_x_m", "initial_y_m", "fallback"]]
    for stem, pos, init, fallback in items:
        rows.append([stem, _fmt(pos[0]), _fmt(pos[1]), _fmt(pos[2]), _fmt(init[0]), _fmt(init[1]), str(bool(fallback)).lower()])
    return rows


def _write_csv(path: Path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def read_positions_csv(path) -> dict:
    out = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out[row["image"]] = np.array([float(row["x_m"]), float(row["y_m"]), float(row["z_m"])])
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"cannot read positions from {path}: {exc}") from exc
    return out


def _localize_one(root: str, index: int, cfg: PipelineConfig):
    ds = load_dataset(root)
    rec = ds.images[index]
    pose0 = rec.camera.pose
    if not cfg.refine:
        return rec.stem, pose0.position, pose0.position, True, None
    img = read_image(rec.path)
    j = cfg.joint
    regions = line_support_regions(img, j.angle_tol, j.min_vertical_extent, j.max_horizontal_extent)
    acc, peaks = localize(ds.scene, regions, rec.camera.intrinsics, pose0, j.localization, j.max_range)
    pos, fallback = refine_position(peaks, pose0.position)
    return rec.stem, pos, pose0.position, fallback, acc.values


def run_localize(dataset_dir, cfg: PipelineConfig, out_dir) -> Path:
    """Voting-only position refinement (top accumulator peak, or the initial position)."""
    ds = load_dataset(dataset_dir)
    out = Path(out_dir)
    (out / "diagnostics").mkdir(parents=True, exist_ok=True)
    res = _map_images(_localize_one, str(ds.root), len(ds.images), cfg)
    _write_csv(out / "refined_positions.csv", _positions_rows((s, p, i, f) for s, p, i, f, _ in res))
    for stem, _, _, _, acc in res:
        if acc is not None:
            _write_accumulator(out, stem, acc)
    return out / "refined_positions.csv"


def _write_accumulator(out: Path, stem: str, values: np.ndarray):
    d = out / "diagnostics"
    rows = [",".join(_fmt(v) for v in row) for row in values[::-1]]
    (d / f"{stem}_accumulator.csv").write_text("\n".join(rows) + "\n")
    _write_png(d / f"{stem}_accumulator.png", accumulator_png(values))


def finalize_heights(scene: MapScene, results, cfg: PipelineConfig) -> dict:
    """Merge per-image votes in image order; returns ``building_id -> HeightVoteArray``."""
    votes = {fp.id: HeightVoteArray(fp.id, cfg.scan) for fp in scene.footprints}
    for r in results:
        for bid in sorted(r.estimates):
            votes[bid].accumulate(r.estimates[bid])
    return votes


def write_heights_csv(path: Path, votes: dict):
    rows = [["building_id", "height_m", "n_votes", "best_score", "n_views_seen"]]
    for bid in sorted(votes):
        v = votes[bid]
        h = v.finalize()
        rows.append([bid, "" if h is None else _fmt(h, 3), v.n_votes, _fmt(v.best_score), v.n_views_seen])
    _write_csv(path, rows)


def run_heights(dataset_dir, cfg: PipelineConfig, out_dir):
    """Joint localization and height estimation on every image, then the cross-image height vote.

    Writes ``refined_positions.csv``, ``heights.csv`` and ``diagnostics/``;
    returns ``(results, votes)``.
    """
    ds = load_dataset(dataset_dir)
    out = Path(out_dir)
    (out / "diagnostics").mkdir(parents=True, exist_ok=True)
    cfg = cfg.replace(output_dir=str(out))
    results = _map_images(process_image, str(ds.root), len(ds.images), cfg)
    if cfg.debug:
        # north-up occupancy grid of the map
        _write_png(out / "diagnostics" / "map_raster.png", ds.scene.raster.grid[::-1].astype(np.uint8) * 255)
    _write_csv(
        out / "refined_positions.csv",
        _positions_rows((r.stem, r.position, r.initial_position, r.fallback) for r in results),
    )
    for r in results:
        (out / "diagnostics" / f"{r.stem}.json").write_text(json.dumps(r.diagnostics, indent=1, sort_keys=True) + "\n")
        if r.accumulator is not None:
            _write_accumulator(out, r.stem, r.accumulator)
    votes = finalize_heights(ds.scene, results, cfg)
    write_heights_csv(out / "heights.csv", votes)
    return results, votes


def run_masks(dataset_dir, cfg: PipelineConfig, out_dir, heights: dict, positions: dict | None = None):
    """Extrude buildings with known heights and render one mask per image."""
    ds = load_dataset(dataset_dir)
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    models = [extrude(fp, height=heights[fp.id]) for fp in ds.scene.footprints if heights.get(fp.id)]
    (out / "models.obj").write_text(export_obj(models))
    for rec in ds.images:
        pose = rec.camera.pose
        if positions is not None and rec.stem in positions:
            p = positions[rec.stem]
            pose = pose.with_position_xy(p[0], p[1])
        mask = render_masks(models, rec.camera.intrinsics, pose, cfg.masks.include_roofs)
        mask.save(out / "masks" / f"{rec.stem}.png")
    return out / "masks"


def run_pipeline(dataset_dir, cfg: PipelineConfig, out_dir) -> dict:
    """Full batch run; a suite directory is processed member by member."""
    members = suite_members(dataset_dir) if not is_dataset(dataset_dir) else []
    if members:
        return {m.name: run_pipeline(m, cfg, Path(out_dir) / m.name) for m in members}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, votes = run_heights(dataset_dir, cfg, out)
    heights = {bid: v.finalize() for bid, v in votes.items()}
    run_masks(dataset_dir, cfg, out, heights, {r.stem: r.position for r in results})
    # worker count and output location do not affect results, so they are left out
    used = cfg.to_dict()
    del used["threads"], used["output_dir"]
    (out / "config_used.json").write_text(json.dumps(used, indent=1, sort_keys=True) + "\n")
    return {
        "images": len(results),
        "fallbacks": sum(r.fallback for r in results),
        "buildings_with_height": sum(h is not None for h in heights.values()),
    }


# ---------------------------------------------------------------- evaluation


@dataclass
class HeightReport:
    accuracy: dict
    n: int
    missing: list
    extra: list
    errors: dict

    def table(self) -> str:
        lines = ["tolerance_m  accuracy"]
        for tol, acc in self.accuracy.items():
            lines.append(f"{tol:>11.1f}  {100 * acc:6.1f}%")
        return "\n".join(lines)


def evaluate_heights(predicted, truth, tolerances=TOLERANCES) -> HeightReport:
    """Fraction of truth buildings whose predicted height is within each tolerance.

    ``predicted``/``truth`` are CSV paths or ``id -> height`` dicts. Missing or
    empty predictions count as wrong; ids only in the prediction are listed.
    """
    pred = predicted if isinstance(predicted, dict) else read_heights_csv(predicted)
    tru = truth if isinstance(truth, dict) else read_heights_csv(truth)
    ids = sorted(b for b, h in tru.items() if h is not None)
    missing = [b for b in ids if pred.get(b) is None]
    extra = sorted(set(pred) - set(tru))
    if missing or extra:
        logger.warning("height id mismatch: %d missing, %d extra", len(missing), len(extra))
    errors = {b: (None if pred.get(b) is None else pred[b] - tru[b]) for b in ids}
    acc = {}
    for tol in tolerances:
        ok = sum(1 for e in errors.values() if e is not None and abs(e) <= tol + 1e-9)
        acc[float(tol)] = ok / len(ids) if ids else float("nan")
    return HeightReport(acc, len(ids), missing, extra, errors)


@dataclass
class MaskReport:
    mean: float
    per_image: dict
    errors: dict


def evaluate_masks(pred_dir, truth_dir) -> MaskReport:
    """Mean mask accuracy over images present in ``truth_dir``."""
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    per, errs = {}, {}
    for tp in sorted(truth_dir.glob("*.png")):
        pp = pred_dir / tp.name
        if not pp.exists():
            errs[tp.stem] = "missing prediction"
            per[tp.stem] = 0.0
            continue
        try:
            per[tp.stem] = mask_accuracy(FacadeMask.load(pp), FacadeMask.load(tp))
        except DimensionMismatch as exc:
            errs[tp.stem] = str(exc)
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return MaskReport(mean, per, errs)


def evaluate_positions(pred_csv, truth_cameras_dir) -> dict:
    pred = read_positions_csv(pred_csv)
    out = {}
    for stem, p in sorted(pred.items()):
        f = Path(truth_cameras_dir) / f"{stem}.json"
        if f.exists():
            t = json.loads(f.read_text())
            out[stem] = math.hypot(p[0] - t["x_m"], p[1] - t["y_m"])
    return out


def evaluate_run(dataset_dir, run_dir, tolerances=TOLERANCES) -> dict:
    """Metrics of one run (or a suite of runs) against the dataset's truth files."""
    dataset_dir, run_dir = Path(dataset_dir), Path(run_dir)
    members = suite_members(dataset_dir) if not is_dataset(dataset_dir) else []
    if members:
        preds, truths, masks, pos = {}, {}, [], []
        for m in members:
            sub = evaluate_run(m, run_dir / m.name, tolerances)
            masks.extend(sub["masks"]["per_image"].values())
            pos.extend(sub["positions"]["errors_m"].values())
            th = read_heights_csv(m / "truth_heights.csv")
            ph = read_heights_csv(run_dir / m.name / "heights.csv")
            truths.update({f"{m.name}/{k}": v for k, v in th.items()})
            preds.update({f"{m.name}/{k}": v for k, v in ph.items()})
        hr = evaluate_heights(preds, truths, tolerances)
        return _metrics(hr, MaskReport(float(np.mean(masks)) if masks else float("nan"), {}, {}), dict(enumerate(pos)))
    hr = evaluate_heights(run_dir / "heights.csv", dataset_dir / "truth_heights.csv", tolerances)
    mr = evaluate_masks(run_dir / "masks", dataset_dir / "truth_masks")
    pe = {}
    if (dataset_dir / "truth_cameras").is_dir() and (run_dir / "refined_positions.csv").exists():
        pe = evaluate_positions(run_dir / "refined_positions.csv", dataset_dir / "truth_cameras")
    return _metrics(hr, mr, pe)


def _metrics(hr: HeightReport, mr: MaskReport, pe: dict) -> dict:
    errs = np.array(list(pe.values())) if pe else np.zeros(0)
    return {
        "heights": {
            "n_buildings": hr.n,
            "accuracy": {f"{k:g}": v for k, v in hr.accuracy.items()},
            "missing": hr.missing,
        },
        "masks": {"mean_accuracy": mr.mean, "per_image": mr.per_image, "errors": mr.errors},
        "positions": {
            "errors_m": {str(k): float(v) for k, v in pe.items()},
            "mean_error_m": float(errs.mean()) if len(errs) else None,
            "within_0.45m": float(np.mean(errs <= 0.45)) if len(errs) else None,
        },
    }


def format_report(metrics: dict, baseline: dict | None = None) -> str:
    """Table-style text report; with a baseline, signed deltas are appended."""
    lines = ["height accuracy by tolerance"]
    for tol, acc in metrics["heights"]["accuracy"].items():
        line = f"  <= {float(tol):.0f} m : {100 * acc:5.1f}%"
        if baseline:
            line += f"   (delta {100 * (acc - baseline['heights']['accuracy'][tol]):+5.1f} pp)"
        lines.append(line)
    m = metrics["masks"]["mean_accuracy"]
    line = f"mean mask accuracy : {100 * m:5.1f}%"
    if baseline:
        line += f"   (delta {100 * (m - baseline['masks']['mean_accuracy']):+5.1f} pp)"
    lines.append(line)
    p = metrics["positions"]
    if p["mean_error_m"] is not None:
        lines.append(f"position error     : mean {p['mean_error_m']:.2f} m, {100 * p['within_0.45m']:.1f}% within 0.45 m")
    return "\n".join(lines)


def error_report(exc: BaseException) -> dict:
    return {"error": type(exc).__name__, "message": str(exc), "ok": False, "known": isinstance(exc, MapFuseError)}
