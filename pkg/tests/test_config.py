import dataclasses
import inspect
import json

import pytest

import mapfuse.facade_render
import mapfuse.geo_core
import mapfuse.height_estimation
import mapfuse.image_features
import mapfuse.localization
import mapfuse.map_model
from mapfuse.config import PipelineConfig
from mapfuse.errors import ConfigError

# public keyword parameters with numeric defaults, and where the pipeline sets them
REACHABLE = {
    ("image_features", "center_density", "sigma_px"): "localization.kernel_sigma",
    ("image_features", "center_density", "cutoff"): "localization.kernel_cutoff",
    ("image_features", "segment_density", "sigma_px"): "localization.kernel_sigma",
    ("image_features", "segment_density", "cutoff"): "localization.kernel_cutoff",
    ("image_features", "line_support_regions", "angle_tol"): "regions.angle_tol",
    ("image_features", "line_support_regions", "min_v"): "regions.min_vertical_extent",
    ("image_features", "line_support_regions", "max_h"): "regions.max_horizontal_extent",
    ("localization", "localize", "max_range"): "visibility.max_range",
    ("localization", "sweep_range", "max_err"): "localization.max_err",
    ("localization", "top_peaks", "k"): "localization.top_k",
    ("localization", "top_peaks", "threshold"): "localization.peak_threshold",
    ("height_estimation", "scan_polylines", "margin"): "features.border_margin",
    ("map_model", "visible_corners", "max_range"): "visibility.max_range",
    ("map_model", "visible_corners", "sample_spacing"): "visibility.sample_spacing",
    ("map_model", "visible_edges", "max_range"): "visibility.max_range",
    ("map_model", "visible_edges", "sample_spacing"): "visibility.sample_spacing",
}
# geometric inputs rather than tunables, or only used for diagnostics
EXEMPT = {
    ("facade_render", "extrude", "height"),
    ("facade_render", "clip_near", "near"),
    ("geo_core", "rotation_from_heading", "pitch_deg"),
    ("geo_core", "rotation_from_heading", "roll_deg"),
    ("map_model", "rasterize_map", "resolution"),
    ("map_model", "rasterize_map", "margin"),
}


def numeric_parameters():
    mods = [
        mapfuse.image_features,
        mapfuse.localization,
        mapfuse.height_estimation,
        mapfuse.map_model,
        mapfuse.facade_render,
        mapfuse.geo_core,
    ]
    for m in mods:
        short = m.__name__.split(".")[-1]
        for name, f in inspect.getmembers(m, inspect.isfunction):
            if f.__module__ != m.__name__ or name.startswith("_"):
                continue
            for p in inspect.signature(f).parameters.values():
                if isinstance(p.default, (int, float)) and not isinstance(p.default, bool):
                    yield (short, name, p.name)


def lookup(d, path):
    for part in path.split("."):
        d = d[part]
    return d


def test_every_numeric_parameter_reachable():
    tree = PipelineConfig().to_dict()
    found = set(numeric_parameters())
    unmapped = found - set(REACHABLE) - EXEMPT
    assert not unmapped, unmapped
    for key, path in REACHABLE.items():
        lookup(tree, path)


def test_documented_defaults():
    c = PipelineConfig()
    f, r, l, s, v = c.features, c.regions, c.localization, c.scan, c.visibility
    assert (f.window, f.bins_per_band, tuple(f.log_sigmas), f.rgb_weight) == (17, 11, (0.5, 1.0), 0.5)
    assert (r.angle_tol, r.min_vertical_extent, r.max_horizontal_extent) == (22.5, 50, 20)
    assert (l.grid_size, l.cell_size, l.top_k, l.peak_threshold, l.bcl_length, l.kernel_sigma) == (40, 0.3, 5, 1.5, 15.0, 10.0)
    assert (s.min_height, s.max_height, s.step, s.low_score_threshold) == (3.0, 100.0, 0.2, 0.15)
    assert v.max_range == 60.0
    assert c.threads == 1 and c.output_dir is None


def test_round_trip_and_load(tmp_path):
    c = PipelineConfig().replace(threads=3, seed=7)
    assert PipelineConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"localization": {"top_k": 3}, "scan": {"step": 0.1}}))
    loaded = PipelineConfig.load(p)
    assert loaded.localization.top_k == 3 and loaded.scan.step == 0.1
    assert loaded.localization.cell_size == 0.3


def test_joint_view_follows_config():
    c = PipelineConfig.from_dict({"regions": {"angle_tol": 10.0}, "visibility": {"max_range": 40.0}})
    assert c.joint.angle_tol == 10.0 and c.joint.max_range == 40.0


@pytest.mark.parametrize(
    "data, fragment",
    [
        ({"bogus": 1}, "bogus"),
        ({"localization": {"topk": 3}}, "localization.topk"),
        ({"localization": {"top_k": 2.5}}, "integer"),
        ({"localization": {"top_k": True}}, "number"),
        ({"scan": {"step": "0.2"}}, "number"),
        ({"refine": 1}, "true/false"),
        ({"features": {"log_sigmas": ["a"]}}, "list"),
        ({"scan": 3}, "object"),
        ({"threads": 0}, "threads"),
        ({"scan": {"min_height": 50.0, "max_height": 10.0}}, "scan"),
        ({"localization": {"vote_mode": "mean"}}, "vote_mode"),
        ({"output_dir": 5}, "string"),
    ],
)
def test_invalid_configs(data, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        PipelineConfig.from_dict(data)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        PipelineConfig.load(bad)


def test_integral_floats_accepted():
    assert PipelineConfig.from_dict({"localization": {"top_k": 4.0}}).localization.top_k == 4


def test_all_fields_are_dataclasses_or_scalars():
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(PipelineConfig(), f.name)
        assert dataclasses.is_dataclass(v) or v is None or isinstance(v, (bool, int, float, str))
