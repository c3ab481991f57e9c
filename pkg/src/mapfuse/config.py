"""Pipeline configuration: every tunable in one validated, JSON-loadable tree."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .height_estimation import HeightScanConfig, JointConfig
from .image_features import SpectralHistogramConfig
from .localization import LocalizationConfig
from .map_model import MAX_RANGE, SAMPLE_SPACING


@dataclass(frozen=True)
class RegionConfig:
    angle_tol: float = 22.5
    min_vertical_extent: int = 50
    max_horizontal_extent: int = 20

    def __post_init__(self):
        if not 0 < self.angle_tol < 90:
            raise ValueError("angle_tol must be in (0, 90) degrees")
        if self.min_vertical_extent < 1 or self.max_horizontal_extent < 1:
            raise ValueError("region extents must be positive")


@dataclass(frozen=True)
class VisibilityConfig:
    max_range: float = MAX_RANGE
    sample_spacing: float = SAMPLE_SPACING

    def __post_init__(self):
        if self.max_range <= 0 or self.sample_spacing <= 0:
            raise ValueError("max_range and sample_spacing must be positive")


@dataclass(frozen=True)
class MaskConfig:
    include_roofs: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    features: SpectralHistogramConfig = field(default_factory=SpectralHistogramConfig)
    regions: RegionConfig = field(default_factory=RegionConfig)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)
    scan: HeightScanConfig = field(default_factory=HeightScanConfig)
    visibility: VisibilityConfig = field(default_factory=VisibilityConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    refine: bool = True
    threads: int = 1
    seed: int = 0
    output_dir: str | None = None
    debug: bool = False

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def joint(self) -> JointConfig:
        return JointConfig(
            self.features,
            self.localization,
            self.scan,
            self.regions.angle_tol,
            self.regions.min_vertical_extent,
            self.regions.max_horizontal_extent,
            self.visibility.max_range,
            self.visibility.sample_spacing,
        )

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _check_scalar(path: str, default, value):
    # the default's type decides what is accepted; bools are never numbers here
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    return value


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        path = prefix + name
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path + ".")
        elif value is None:
            if default is not None:
                raise ConfigError(f"{path}: null not allowed")
            kwargs[name] = None
        elif default is None:
            # optional fields: output_dir is a string, border_margin an integer
            if name == "output_dir":
                if not isinstance(value, str):
                    raise ConfigError(f"{path}: expected a string")
                kwargs[name] = value
            else:
                kwargs[name] = _check_scalar(path, 0, value)
        else:
            kwargs[name] = _check_scalar(path, default, value)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc
