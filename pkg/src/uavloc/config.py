"""Key-value configuration files.

Configs are INI-style text read with :mod:`configparser`. Each section maps onto
one settings object; keys are the field names and values are Python literals
(numbers, ``true``/``false``, quoted or bare strings, tuples)::

    [grid]
    preset = desk          ; optional starting point, fields below override it
    x_step = 0.25

    [pillars]
    max_pillars = 6400
    max_points_per_pillar = 32

    [network]
    backbone_blocks = ((2, 16, 2), (2, 32, 2))
    score_threshold = 0.6

    [train]
    learning_rate = 2e-4
    epochs = 30

    [shell]
    margin = 2.0

    [heuristics]
    height_tolerance = 0.3

    [cluster]
    link_radius = 0.3
    method = euclidean

    [scene]
    noise_sigma = 0.01
    frame_rate = 10
    split = 0.75

Unknown keys are rejected so that typos surface as configuration errors.
"""

import ast
import configparser
import dataclasses
from pathlib import Path

from ._fileio import atomic_write
from .detector.network import DESK_NETWORK, NetworkConfig
from .detector.train import DESK_TRAINING, TrainConfig
from .pillars import GRID_PRESETS, PILLAR_LIMITS, GridParams
from .synth import SceneSpec
from .validation import ConfigError

__all__ = [
    "read_config",
    "parse_config",
    "grid_from_config",
    "pillar_limits_from_config",
    "network_from_config",
    "train_from_config",
    "cluster_from_config",
    "scene_from_config",
    "to_section",
    "write_config",
]

CLUSTER_KEYS = {
    "shell": ("margin",),
    "heuristics": ("altimeter_height", "height_tolerance", "min_volume", "max_aspect_diff"),
    "cluster": ("link_radius", "min_points", "method", "n_clusters", "velocity_gate", "max_speed"),
}
SCENE_EXTRA = ("frame_rate", "split")


def parse_value(text):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s  # bare string


def _deep_tuple(v):
    if isinstance(v, list):
        return tuple(_deep_tuple(x) for x in v)
    if isinstance(v, tuple):
        return tuple(_deep_tuple(x) for x in v)
    return v


def parse_config(text):
    """Parse config text into ``{section: {key: value}}``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {sec: {k: _deep_tuple(parse_value(v)) for k, v in cp.items(sec)} for sec in cp.sections()}


def read_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text())


def _build(cls, base, values, section):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return dataclasses.replace(base, **values) if base is not None else cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _coerce_float(values, cls):
    # "1" in a float field should not trip the integer/float distinction
    out = dict(values)
    for f in dataclasses.fields(cls):
        if f.name in out and f.type in (float, "float") and isinstance(out[f.name], int) \
                and not isinstance(out[f.name], bool):
            out[f.name] = float(out[f.name])
    return out


def grid_from_config(cfg, preset="desk"):
    values = dict(cfg.get("grid", {}))
    preset = values.pop("preset", preset)
    if preset is not None and preset not in GRID_PRESETS:
        raise ConfigError(f"unknown grid preset {preset!r}")
    base = GRID_PRESETS[preset] if preset is not None else None
    return _build(GridParams, base, _coerce_float(values, GridParams), "grid")


def pillar_limits_from_config(cfg, preset="desk"):
    values = dict(cfg.get("pillars", {}))
    max_p, max_n = PILLAR_LIMITS[preset]
    max_p = values.pop("max_pillars", max_p)
    max_n = values.pop("max_points_per_pillar", max_n)
    if values:
        raise ConfigError(f"unknown key(s) in [pillars]: {', '.join(sorted(values))}")
    return max_p, max_n


def network_from_config(cfg):
    return _build(NetworkConfig, DESK_NETWORK, _coerce_float(cfg.get("network", {}), NetworkConfig), "network")


def train_from_config(cfg, preset="desk"):
    base = DESK_TRAINING if preset == "desk" else TrainConfig()
    return _build(TrainConfig, base, _coerce_float(cfg.get("train", {}), TrainConfig), "train")


def cluster_from_config(cfg):
    """Keyword arguments for :class:`~uavloc.cluster.ClusterLocalizer`."""
    out = {}
    for section, keys in CLUSTER_KEYS.items():
        values = cfg.get(section, {})
        unknown = set(values) - set(keys)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        out.update(values)
    return out


def scene_from_config(cfg):
    """``(SceneSpec, frame_rate, split)`` from the ``[scene]`` section."""
    values = dict(cfg.get("scene", {}))
    frame_rate = float(values.pop("frame_rate", 10.0))
    split = float(values.pop("split", 0.75))
    return _build(SceneSpec, None, _coerce_float(values, SceneSpec), "scene"), frame_rate, split


def to_section(name, obj):
    """Serialize a settings dataclass as one config section."""
    lines = [f"[{name}]"]
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


def write_config(path, sections):
    """Write ``{section_name: dataclass}`` to ``path`` atomically."""
    atomic_write(path, "\n".join(to_section(k, v) for k, v in sections.items()))
