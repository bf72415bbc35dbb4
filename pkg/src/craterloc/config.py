"""One JSON file for every tunable threshold.

The file holds one object per section; each section's keys are the fields of
the matching dataclass, and anything omitted keeps its default::

    {"lidar_detector": {"accept_fraction": -0.3}, "traverse": {"update_every_m": 5}}
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, fields
from pathlib import Path

from .lidar_detector import LidarDetectorConfig
from .localizer import LocalizerConfig, TraverseConfig
from .sensors import LidarConfig, StereoConfig
from .stereo_detector import StereoDetectorConfig

SECTIONS = {
    "lidar_sensor": LidarConfig,
    "stereo_sensor": StereoConfig,
    "lidar_detector": LidarDetectorConfig,
    "stereo_detector": StereoDetectorConfig,
    "localizer": LocalizerConfig,
    "traverse": TraverseConfig,
}


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    return {name: cls() for name, cls in SECTIONS.items()}


def build(overrides: dict | None) -> dict:
    """Section name -> dataclass instance, with ``overrides`` applied."""
    overrides = overrides or {}
    unknown = set(overrides) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    out = {}
    for name, cls in SECTIONS.items():
        given = overrides.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        names = {f.name for f in fields(cls)}
        bad = set(given) - names
        if bad:
            raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(sorted(bad))}")
        try:
            out[name] = cls(**{k: _decode(v) for k, v in given.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name!r} section: {exc}") from None
    return out


def load(path) -> dict:
    if path is None:
        return build({})
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build(data)


def _decode(v):
    # JSON has no infinity; accept the strings "inf" and "-inf"
    if isinstance(v, str) and v in ("inf", "-inf"):
        return float(v)
    return v


def _encode(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def to_json(cfgs: dict) -> dict:
    return {name: {k: _encode(v) for k, v in asdict(cfg).items()} for name, cfg in cfgs.items()}
