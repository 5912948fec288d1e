"""Run configuration and fitted-parameter files (both JSON).

Every level of the config rejects keys it does not know, so a typo fails
loudly instead of silently falling back to a default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from ..errors import DataError, InvalidArgument
from ..exposure import ExposureParams
from ..develop import MackParams
from ..gradcal import PARAM_NAMES, ResistParams, Schedule, default_params
from .io import read_json, write_json

SOLVERS = ("vertical", "fmm")
_EXPOSURE_KEYS = ("A", "B", "C_eff", "thickness_nm", "nz")
_MACK_KEYS = ("n", "m_th", "r_max", "r_min", "t_dev")


def _reject_unknown(section: str, raw: Mapping, allowed) -> None:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise DataError(f"config [{section}]: unknown keys {unknown}")


def params_to_dict(p: ResistParams) -> dict[str, Any]:
    out: dict[str, Any] = {k: getattr(p.exposure, k) for k in _EXPOSURE_KEYS}
    out.update({k: getattr(p.mack, k) for k in _MACK_KEYS})
    out["tau"] = p.tau
    out["s"] = p.s
    out["calibratable"] = sorted(p.calibratable)
    return out


def params_from_dict(raw: Mapping[str, Any], base: ResistParams | None = None) -> ResistParams:
    """Build parameters from a flat mapping; missing keys come from ``base``."""
    if not isinstance(raw, Mapping):
        raise DataError("params must be a mapping")
    _reject_unknown("params", raw, _EXPOSURE_KEYS + _MACK_KEYS + ("tau", "s", "calibratable"))
    base = base or default_params()
    try:
        exposure = ExposureParams(**{k: raw.get(k, getattr(base.exposure, k)) for k in _EXPOSURE_KEYS})
        mack = MackParams(**{k: raw.get(k, getattr(base.mack, k)) for k in _MACK_KEYS})
        return ResistParams(exposure, mack, float(raw.get("tau", base.tau)), float(raw.get("s", base.s)),
                            frozenset(raw.get("calibratable", base.calibratable)))
    except (InvalidArgument, TypeError) as exc:
        raise DataError(f"invalid params: {exc}") from exc


@dataclass(frozen=True)
class BenchConfig:
    tiles: int = 20
    warmup: int = 3
    fine_pitch_nm: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs besides the manifest."""

    params: ResistParams = field(default_factory=default_params)
    solver: str = "vertical"
    resolution_nm: float = 1.0
    schedule: Schedule = field(default_factory=Schedule)
    out: str = "out"
    seed: int = 0
    workers: int = 1
    exposure_steps: int = 64
    window_px: int = 21
    save_arrival: bool = False
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise DataError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not self.resolution_nm > 0:
            raise DataError(f"resolution_nm must be positive, got {self.resolution_nm}")
        if self.workers < 1 or self.exposure_steps < 1:
            raise DataError("workers and exposure_steps must be >= 1")
        if self.window_px < 1 or self.window_px % 2 == 0:
            raise DataError(f"window_px must be odd and positive, got {self.window_px}")

    def to_json(self) -> dict[str, Any]:
        raw = {f.name: getattr(self, f.name) for f in fields(self)}
        raw["params"] = params_to_dict(self.params)
        raw["schedule"] = asdict(self.schedule)
        raw["bench"] = asdict(self.bench)
        return raw


def _sub(section: str, cls, raw: Any):
    if not isinstance(raw, Mapping):
        raise DataError(f"config [{section}] must be a mapping")
    _reject_unknown(section, raw, [f.name for f in fields(cls)])
    try:
        return cls(**raw)
    except TypeError as exc:
        raise DataError(f"config [{section}]: {exc}") from exc


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise DataError("config must be a mapping")
    _reject_unknown("top", raw, [f.name for f in fields(RunConfig)])
    kw = dict(raw)
    if "params" in kw:
        kw["params"] = params_from_dict(kw["params"])
    if "schedule" in kw:
        kw["schedule"] = _sub("schedule", Schedule, kw["schedule"])
    if "bench" in kw:
        kw["bench"] = _sub("bench", BenchConfig, kw["bench"])
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise DataError(f"config: {exc}") from exc


def load_config(path: Path | None) -> RunConfig:
    return RunConfig() if path is None else config_from_dict(read_json(path))


def save_params(path: Path, params: ResistParams, provenance: Mapping[str, Any]) -> None:
    write_json(path, {"params": params_to_dict(params), "provenance": dict(provenance)})


def load_params(path: Path) -> tuple[ResistParams, dict[str, Any]]:
    raw = read_json(path)
    if not isinstance(raw, Mapping) or "params" not in raw:
        raise DataError(f"{path}: not a parameter file")
    _reject_unknown("params file", raw, ("params", "provenance"))
    return params_from_dict(raw["params"]), dict(raw.get("provenance", {}))


__all__ = ["PARAM_NAMES", "RunConfig", "BenchConfig", "load_config", "config_from_dict",
           "params_from_dict", "params_to_dict", "save_params", "load_params", "SOLVERS"]
