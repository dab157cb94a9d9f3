"""Run configuration: ``key = value`` lines grouped in sections, merged with CLI overrides.

Example::

    [sampler]
    num_steps = 50
    image_guidance = 1.6

    [saas]
    tau = 0.4
    window = 0, 20
    vital_layers = 4, 5, 6, 7

Precedence is CLI override > file > built-in default. Unknown sections or keys
are rejected.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .backbone import BackboneConfig, SamplerConfig
from .core import SaasConfig
from .layout import TokenLayout, build_layout

RUN_MODES = ("baseline", "saas", "fixed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutConfig:
    grid_side: int = 8
    image_grid_side: int | None = 4
    text_len: int = 8
    spans: tuple[tuple[int, int], ...] = ((0, 4), (4, 8))

    def build(self) -> TokenLayout:
        return build_layout(self.grid_side, self.image_grid_side, self.text_len, self.spans)


@dataclass(frozen=True)
class RunSettings:
    mode: str = "saas"
    factor: float = 2.0
    condition_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in RUN_MODES:
            raise ValueError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if not (self.factor > 0 and math.isfinite(self.factor)):
            raise ValueError(f"factor must be positive, got {self.factor}")


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    saas: SaasConfig = field(default_factory=SaasConfig)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def snapshot(self) -> dict:
        return {name: _jsonable(asdict(getattr(self, name))) for name in SECTIONS}


SECTIONS: dict[str, type] = {
    "backbone": BackboneConfig,
    "sampler": SamplerConfig,
    "saas": SaasConfig,
    "layout": LayoutConfig,
    "run": RunSettings,
}


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str) -> Any:
        return None if text.strip().lower() in ("", "none", "null") else conv(text)

    return parse


def _window(text: str) -> tuple[int, int]:
    vals = _ints(text)
    if len(vals) == 1:
        return (0, vals[0])
    if len(vals) == 2:
        return vals
    raise ValueError("window takes 'stop' or 'start, stop'")


def _xi(text: str) -> float | tuple[float, ...]:
    vals = _floats(text)
    if not vals:
        raise ValueError("xi needs at least one value")
    return vals[0] if len(vals) == 1 else vals


def _spans(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        lo, hi = _ints(part.replace("-", " ").replace(":", " "))
        out.append((lo, hi))
    return tuple(out)


PARSERS: dict[str, dict[str, Callable[[str], Any]]] = {
    "backbone": {"num_layers": int, "num_heads": int, "model_dim": int, "seed": int, "vocab_size": int},
    "sampler": {"num_steps": int, "image_guidance": float, "text_guidance": float, "seed": int},
    "saas": {
        "tau": float,
        "threshold_mode": str.strip,
        "xi": _xi,
        "vital_layers": _optional(_ints),
        "window": _window,
        "alpha_cap": float,
        "kernel_size": int,
        "kernel_sigma": float,
        "outside_mask_mode": str.strip,
        "otsu_bins": int,
        "force_alpha": _optional(float),
        "force_mask": _optional(str.strip),
    },
    "layout": {
        "grid_side": int,
        "image_grid_side": _optional(int),
        "text_len": int,
        "spans": _spans,
    },
    "run": {"mode": str.strip, "factor": float, "condition_seed": int},
}


def _parse_value(section: str, key: str, value: Any) -> Any:
    if section not in PARSERS:
        raise ConfigError(f"unknown section [{section}]")
    if key not in PARSERS[section]:
        raise ConfigError(f"unknown key '{key}' in [{section}]")
    if not isinstance(value, str):
        return value
    try:
        return PARSERS[section][key](value)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {value!r} ({exc})") from None


def read_config_file(path: str | Path | None) -> dict[str, dict[str, Any]]:
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
    parser.optionxform = str
    try:
        text = Path(path).read_text()
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            out.setdefault(section, {})[key] = _parse_value(section, key, raw)
    return out


def build_config(values: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    parts = {}
    for section, cls in SECTIONS.items():
        kwargs = dict(values.get(section, {}))
        known = {f.name for f in fields(cls)}
        for key in kwargs:
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
        try:
            parts[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    cfg = RunConfig(**parts)
    try:
        cfg.layout.build()
    except ValueError as exc:
        raise ConfigError(f"[layout] {exc}") from None
    vital = cfg.saas.vital(cfg.backbone.num_layers)
    if min(vital) < 0 or max(vital) >= cfg.backbone.num_layers:
        raise ConfigError(f"[saas] vital_layers {vital} outside [0, {cfg.backbone.num_layers})")
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` keyed ``"section.key"``."""
    values = read_config_file(path)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        values.setdefault(section, {})[key] = _parse_value(section, key, value)
    return build_config(values)


def config_from_snapshot(snapshot: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    """Rebuild a config from a manifest snapshot (lists become tuples)."""
    values: dict[str, dict[str, Any]] = {}
    for section, body in snapshot.items():
        values[section] = {}
        for key, v in body.items():
            if key == "spans":
                v = tuple(tuple(s) for s in v)
            elif isinstance(v, list):
                v = tuple(v)
            values[section][key] = v
    return build_config(values)


def with_overrides(cfg: RunConfig, **sections: Mapping[str, Any]) -> RunConfig:
    return replace(cfg, **{name: replace(getattr(cfg, name), **vals) for name, vals in sections.items()})
