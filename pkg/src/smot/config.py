"""Run configuration: versioned JSON with strict, field-path validation."""

from __future__ import annotations

import dataclasses
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

SCHEMA_VERSION = 1
FAMILIES = ("uniform", "bachelier", "gbm", "tabulated")


@dataclass(frozen=True)
class FamilyConfig:
    family: str
    delta: float = 0.05
    table_path: str | None = None

    def validate(self, where: str):
        if self.family not in FAMILIES:
            raise ValidationError(f"{where}.family: expected one of {list(FAMILIES)}, got {self.family!r}")
        if not (0 < self.delta < 1):
            raise ValidationError(f"{where}.delta: must lie in (0, 1), got {self.delta}")
        if self.family == "tabulated" and not self.table_path:
            raise ValidationError(f"{where}.table_path: required for the tabulated family")


@dataclass(frozen=True)
class CouplingConfig:
    t: float = 0.0
    eps: float = 0.6931471805599453
    kind: str = "decreasing"
    grid_points: int = 201
    interp_nodes: int | None = None

    def validate(self, where: str):
        if self.kind not in ("decreasing", "increasing"):
            raise ValidationError(f"{where}.kind: expected 'decreasing' or 'increasing'")
        if not self.eps > 0:
            raise ValidationError(f"{where}.eps: must be > 0")
        if self.grid_points < 2:
            raise ValidationError(f"{where}.grid_points: must be >= 2")
        if self.interp_nodes is not None and self.interp_nodes < 16:
            raise ValidationError(f"{where}.interp_nodes: must be >= 16")


@dataclass(frozen=True)
class CurveConfig:
    n_times: int = 101
    eps: tuple[float, ...] = ()
    method: str = "auto"

    def validate(self, where: str):
        if self.n_times < 2:
            raise ValidationError(f"{where}.n_times: must be >= 2")
        if any(not e > 0 for e in self.eps):
            raise ValidationError(f"{where}.eps: entries must be > 0")
        if self.method not in ("auto", "generic", "transcendental"):
            raise ValidationError(f"{where}.method: expected auto, generic or transcendental")


@dataclass(frozen=True)
class SimulateConfig:
    scheme: str = "sde"
    dt: float = 1e-3
    n: int = 64
    n_paths: int = 10000
    stats_times: tuple[float, ...] = (0.25, 0.5, 1.0)
    dense_times: tuple[float, ...] = ()
    ks_threshold: float | None = None

    def validate(self, where: str):
        if self.scheme not in ("sde", "discrete", "increasing"):
            raise ValidationError(f"{where}.scheme: expected sde, discrete or increasing")
        if not (0 < self.dt <= 0.1):
            raise ValidationError(f"{where}.dt: must lie in (0, 0.1], got {self.dt}")
        if self.n < 1:
            raise ValidationError(f"{where}.n: must be >= 1")
        if self.n_paths < 1:
            raise ValidationError(f"{where}.n_paths: must be >= 1, got {self.n_paths}")
        if self.ks_threshold is not None and not self.ks_threshold > 0:
            raise ValidationError(f"{where}.ks_threshold: must be > 0")


@dataclass(frozen=True)
class DualityConfig:
    cost: str = "default"
    dt: float = 1e-3
    n_paths: int = 10000
    tol_hedge: float = 1e-3
    violation_threshold: float = 0.01
    n_t: int = 128
    chain_n: int | None = None

    def validate(self, where: str):
        if not (0 < self.dt <= 0.1):
            raise ValidationError(f"{where}.dt: must lie in (0, 0.1], got {self.dt}")
        if self.n_paths < 1:
            raise ValidationError(f"{where}.n_paths: must be >= 1, got {self.n_paths}")
        if not self.tol_hedge > 0:
            raise ValidationError(f"{where}.tol_hedge: must be > 0")
        if not (0 < self.violation_threshold < 1):
            raise ValidationError(f"{where}.violation_threshold: must lie in (0, 1)")
        if self.n_t < 2:
            raise ValidationError(f"{where}.n_t: must be >= 2")
        if self.chain_n is not None and self.chain_n < 1:
            raise ValidationError(f"{where}.chain_n: must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    family: FamilyConfig
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int | None = None
    out: str = "out"
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    curve: CurveConfig = field(default_factory=CurveConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    duality: DualityConfig = field(default_factory=DualityConfig)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if self.seed < 0:
            raise ValidationError("seed: must be >= 0")
        if self.threads is not None and self.threads < 1:
            raise ValidationError("threads: must be >= 1")
        self.family.validate("family")
        for name in ("coupling", "curve", "simulate", "duality"):
            getattr(self, name).validate(name)
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ValidationError(f"{where}: must not be null")
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ValidationError(f"{where}: expected a list")
        item = typing.get_args(tp)[0]
        return tuple(_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ValidationError(f"{where}: must be finite")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{where}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported field type {tp}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ValidationError(f"unknown field {prefix}{unknown[0]}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = f"{where}.{f.name}" if where else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], path)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ValidationError(f"missing required field {path}")
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)
