"""Pipeline configuration: one INI file with sections, validated against bounds.

Unknown sections or keys are rejected, and every out-of-bound value is reported
as ``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from lnforge.fileio import json_digest


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _floats(n: int | None = None):
    def parse(text: str):
        vals = tuple(float(x) for x in str(text).replace(",", " ").split())
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} values")
        return vals
    return parse


def _ints(n: int | None = None):
    def parse(text: str):
        vals = tuple(int(x) for x in str(text).replace(",", " ").split())
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} values")
        return vals
    return parse


def _spec(parse=None, lo=None, hi=None, lo_open=False, hi_open=False):
    return {"parse": parse, "lo": lo, "hi": hi, "lo_open": lo_open, "hi_open": hi_open}


@dataclass
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    out_dir: str = "out"


@dataclass
class Geometry:
    patch_dims: tuple[int, int, int] = field(default=(24, 24, 24), metadata=_spec(_ints(3), 4, 256))
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0), metadata=_spec(_floats(3), 0.0, 100.0, lo_open=True))
    tau: float = field(default=0.2, metadata=_spec(float, 0.0, 10.0, lo_open=True))
    # 0 selects half the patch's shortest physical extent
    norm_scale: float = field(default=0.0, metadata=_spec(float, 0.0, 1e4))


@dataclass
class Codec:
    shape_latent_dim: int = field(default=32, metadata=_spec(int, 1, 4096))
    texture_latent_dim: int = field(default=32, metadata=_spec(int, 1, 4096))


@dataclass
class Schedule:
    T: int = field(default=200, metadata=_spec(int, 2, 100000))
    beta_start: float = field(default=1e-4, metadata=_spec(float, 0.0, 1.0, lo_open=True, hi_open=True))
    beta_end: float = field(default=0.02, metadata=_spec(float, 0.0, 1.0, lo_open=True, hi_open=True))


@dataclass
class Training:
    lr: float = field(default=1e-3, metadata=_spec(float, 0.0, 1.0, lo_open=True))
    steps: int = field(default=3000, metadata=_spec(int, 1, 10**7))
    batch_size: int = field(default=64, metadata=_spec(int, 1, 10**5))
    hidden: int = field(default=256, metadata=_spec(int, 1, 8192))
    lam: float = field(default=1.0, metadata=_spec(float, 0.0, 1e6))
    sigma_adapter: float = field(default=0.25, metadata=_spec(float, 0.0, 100.0))
    adapter_lr: float = field(default=3e-3, metadata=_spec(float, 0.0, 1.0, lo_open=True))
    adapter_steps: int = field(default=300, metadata=_spec(int, 1, 10**7))
    adapter_batch: int = field(default=8, metadata=_spec(int, 1, 10**4))
    adapter_norm: str = field(default="l1", metadata=_spec(str))


@dataclass
class Placement:
    hu_lo: float = field(default=-175.0, metadata=_spec(float, -5000.0, 5000.0))
    hu_hi: float = field(default=250.0, metadata=_spec(float, -5000.0, 5000.0))
    min_soft_fraction: float = field(default=0.9, metadata=_spec(float, 0.0, 1.0))
    margin: int = field(default=2, metadata=_spec(int, 0, 64))
    stride: int = field(default=4, metadata=_spec(int, 1, 64))
    radius_ladder: tuple[float, ...] = field(default=(2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0),
                                             metadata=_spec(_floats(), 0.0, 1000.0, lo_open=True))
    feather_mm: float = field(default=2.0, metadata=_spec(float, 0.0, 100.0))
    max_retries: int = field(default=20, metadata=_spec(int, 1, 10**4))
    max_shape_tries: int = field(default=10, metadata=_spec(int, 1, 10**4))


@dataclass
class LongAxis:
    lo: float = field(default=1.7, metadata=_spec(float, 0.0, 1000.0, lo_open=True))
    hi: float = field(default=30.0, metadata=_spec(float, 0.0, 1000.0, lo_open=True))


@dataclass
class Metric:
    k: int = field(default=3, metadata=_spec(int, 1, 1000))
    bins: int = field(default=10, metadata=_spec(int, 1, 10000))


@dataclass
class Run:
    seed: int = field(default=0, metadata=_spec(int, 0, 2**64 - 1))


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    geometry: Geometry = field(default_factory=Geometry)
    codec: Codec = field(default_factory=Codec)
    schedule: Schedule = field(default_factory=Schedule)
    training: Training = field(default_factory=Training)
    placement: Placement = field(default_factory=Placement)
    long_axis: LongAxis = field(default_factory=LongAxis)
    metric: Metric = field(default_factory=Metric)
    run: Run = field(default_factory=Run)

    def __post_init__(self):
        validate(self)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Digest of every setting that can change results; file locations are left out."""
        d = self.as_dict()
        d.pop("paths")
        return json_digest(d)

    def norm_scale(self) -> float:
        g = self.geometry
        if g.norm_scale > 0:
            return g.norm_scale
        return 0.5 * min(n * s for n, s in zip(g.patch_dims, g.spacing))


def _check_value(key: str, value, meta: dict):
    values = value if isinstance(value, tuple) else (value,)
    if isinstance(value, tuple) and not value:
        raise ConfigError(key, "must not be empty")
    for v in values:
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(key, "must be finite")
        lo, hi = meta.get("lo"), meta.get("hi")
        if lo is not None and (v < lo or (meta["lo_open"] and v == lo)):
            raise ConfigError(key, f"value {v} below bound {lo}")
        if hi is not None and (v > hi or (meta["hi_open"] and v == hi)):
            raise ConfigError(key, f"value {v} above bound {hi}")


def validate(cfg: PipelineConfig) -> None:
    for section in dataclasses.fields(cfg):
        sec = getattr(cfg, section.name)
        for f in dataclasses.fields(sec):
            if f.metadata:
                _check_value(f"{section.name}.{f.name}", getattr(sec, f.name), f.metadata)
    if not cfg.schedule.beta_start <= cfg.schedule.beta_end:
        raise ConfigError("schedule.beta_end", "must be >= beta_start")
    if not cfg.placement.hu_lo < cfg.placement.hu_hi:
        raise ConfigError("placement.hu_hi", "must exceed hu_lo")
    if not cfg.long_axis.lo < cfg.long_axis.hi:
        raise ConfigError("long_axis.hi", "must exceed lo")
    if cfg.training.adapter_norm not in ("l1", "l2"):
        raise ConfigError("training.adapter_norm", "must be l1 or l2")
    if list(cfg.placement.radius_ladder) != sorted(cfg.placement.radius_ladder):
        raise ConfigError("placement.radius_ladder", "must be ascending")


def _parse_field(key: str, f: dataclasses.Field, text: str):
    parse = f.metadata.get("parse") if f.metadata else None
    if parse is None:
        parse = str
    try:
        return parse(text.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text!r}: {exc}") from exc


def from_mapping(data: dict[str, dict[str, str]], base: PipelineConfig | None = None) -> PipelineConfig:
    """Build a config from ``{section: {key: text}}``, overriding ``base``."""
    cfg = dataclasses.replace(base) if base else PipelineConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    updates = {}
    for name, entries in data.items():
        if name not in sections:
            raise ConfigError(name, "unknown section")
        sec = getattr(cfg, name)
        known = {f.name: f for f in dataclasses.fields(sec)}
        changes = {}
        for key, text in entries.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}", "unknown key")
            changes[key] = _parse_field(f"{name}.{key}", known[key], str(text))
        updates[name] = dataclasses.replace(sec, **changes)
    cfg = dataclasses.replace(cfg, **updates)
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, dict[str, str]] | None = None) -> PipelineConfig:
    data: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (schedule.T)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError("config", f"malformed config file: {exc}") from exc
        data = {s: dict(parser.items(s)) for s in parser.sections()}
    for sec, entries in (overrides or {}).items():
        data.setdefault(sec, {}).update(entries)
    return from_mapping(data)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for section, values in cfg.as_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, (list, tuple)):
                value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
