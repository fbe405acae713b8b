"""Run configuration read from a TOML file.

Every physical quantity carries its unit in the key name. Unknown keys and
wrong types are rejected with a :class:`ConfigError` naming the key.

Example::

    seed = 1

    [physics]
    r0_marker_um = 13.5
    r0_marker_meaning = "f0_contour"   # or "r0"
    f_prime_ref_V_per_cm_per_us = 1.0
    channel_set = "default"             # or "single:0,0"

    [simulation]
    mean_density_cm3 = 4.15e7
    density_jitter_rel = 0.3
    volume_cm3 = 2.4e-4
    sweep_grid_V_per_cm_per_us = [0.6, 1.2, 2.4, 4.8, 7.8]
    n_shots = 1000
    mode = "binomial"
    bbr_fraction = 0.0
    sweep_enabled = true

    [simulation.detection]
    kind = "linear"
    g0_cm3_per_Vs = 4.15e15

    [simulation.noise]
    enabled = true
    alpha_per_sqrt_nVs = 6.4
    beta_eff_per_nVs = 0.072
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibration import REFERENCE_LINEAR_G0, ConversionModel
from .noise import REFERENCE_ALPHA, REFERENCE_BETA_EFF, NoiseModel
from .physics import (F_PRIME_REF, R0_MARKER_UM, PairPhysics, default_channel_set,
                      r0_from_marker, single_channel_set)
from .simulator import MODES, SimConfig, default_sweep_grid

__all__ = ["ConfigError", "PhysicsConfig", "DetectionConfig", "NoiseConfig", "SimulationConfig",
           "FitConfig", "NoiseAnalysisConfig", "TableConfig", "IOConfig", "RunConfig", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicsConfig:
    r0_marker_um: float = R0_MARKER_UM
    r0_marker_meaning: str = "f0_contour"
    f_prime_ref_V_per_cm_per_us: float = F_PRIME_REF
    channel_set: str = "default"

    def build(self) -> PairPhysics:
        try:
            r0_ref = r0_from_marker(self.r0_marker_um, self.r0_marker_meaning)
            if self.channel_set == "default":
                channels = default_channel_set()
            elif self.channel_set.startswith("single:"):
                channels = single_channel_set(self.channel_set.split(":", 1)[1])
            else:
                raise ValueError(f"unknown channel_set {self.channel_set!r}")
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"physics: {exc}") from None
        return PairPhysics(r0_ref=r0_ref, f_prime_ref=self.f_prime_ref_V_per_cm_per_us,
                           channels=channels)


@dataclass(frozen=True)
class DetectionConfig:
    kind: str = "linear"
    g0_cm3_per_Vs: float = REFERENCE_LINEAR_G0
    g1_cm3_per_Vs2: float = 0.0

    def build(self) -> ConversionModel:
        try:
            if self.kind == "linear":
                return ConversionModel.linear(self.g0_cm3_per_Vs)
            if self.kind == "quadratic":
                return ConversionModel.quadratic(self.g0_cm3_per_Vs, self.g1_cm3_per_Vs2)
        except ValueError as exc:
            raise ConfigError(f"simulation.detection: {exc}") from None
        raise ConfigError(f"simulation.detection.kind must be linear or quadratic, got {self.kind!r}")


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = True
    alpha_per_sqrt_nVs: float = REFERENCE_ALPHA
    beta_eff_per_nVs: float = REFERENCE_BETA_EFF

    def build(self) -> NoiseModel | None:
        if not self.enabled:
            return None
        try:
            return NoiseModel(self.alpha_per_sqrt_nVs, self.beta_eff_per_nVs)
        except ValueError as exc:
            raise ConfigError(f"simulation.noise: {exc}") from None


@dataclass(frozen=True)
class SimulationConfig:
    mean_density_cm3: float = 4.15e7
    density_jitter_rel: float = 0.3
    volume_cm3: float = 2.4e-4
    sweep_grid_V_per_cm_per_us: tuple[float, ...] = field(default_factory=default_sweep_grid)
    n_shots: int = 1000
    mode: str = "binomial"
    bbr_fraction: float = 0.0
    sweep_enabled: bool = True
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)


@dataclass(frozen=True)
class FitConfig:
    kind: str = "linear"  # linear | quadratic | both
    significance: float = 0.99
    weights: str = "uniform"


@dataclass(frozen=True)
class NoiseAnalysisConfig:
    bins_per_group: int = 50
    trim_edges: bool = True
    tol: float = 1e-6
    max_iter: int = 100


@dataclass(frozen=True)
class TableConfig:
    eta_min_cm3: float = 1e6
    eta_max_cm3: float = 1e9
    n_eta: int = 31
    f_prime_grid_V_per_cm_per_us: tuple[float, ...] = field(default_factory=default_sweep_grid)
    polar_f_prime_V_per_cm_per_us: float = 1.0
    polar_channel: str = "0,0"
    polar_n_theta: int = 361
    polar_r_max_um: float = 30.0
    polar_n_r: int = 61


@dataclass(frozen=True)
class IOConfig:
    out_dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    noise: NoiseAnalysisConfig = field(default_factory=NoiseAnalysisConfig)
    table: TableConfig = field(default_factory=TableConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def __post_init__(self):
        _validate(self)

    def sim_config(self, seed: int | None = None) -> SimConfig:
        s = self.simulation
        try:
            return SimConfig(
                mean_density=s.mean_density_cm3,
                density_jitter_rel=s.density_jitter_rel,
                volume=s.volume_cm3,
                sweep_grid=s.sweep_grid_V_per_cm_per_us,
                n_shots=s.n_shots,
                mode=s.mode,
                detection=s.detection.build(),
                noise=s.noise.build(),
                bbr_fraction=s.bbr_fraction,
                seed=self.seed if seed is None else seed,
                sweep_enabled=s.sweep_enabled,
                physics=self.physics.build(),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"simulation: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _validate(cfg: RunConfig) -> None:
    s = cfg.simulation
    checks = [
        (s.mean_density_cm3 > 0, "simulation.mean_density_cm3 must be > 0"),
        (s.density_jitter_rel >= 0, "simulation.density_jitter_rel must be >= 0"),
        (s.volume_cm3 > 0, "simulation.volume_cm3 must be > 0"),
        (s.n_shots >= 0, "simulation.n_shots must be >= 0"),
        (s.mode in MODES, f"simulation.mode must be one of {', '.join(MODES)}"),
        (0 <= s.bbr_fraction < 1, "simulation.bbr_fraction must lie in [0, 1)"),
        (len(s.sweep_grid_V_per_cm_per_us) > 0 and all(f > 0 for f in s.sweep_grid_V_per_cm_per_us),
         "simulation.sweep_grid_V_per_cm_per_us must hold positive slew rates"),
        (cfg.fit.kind in ("linear", "quadratic", "both"), "fit.kind must be linear, quadratic or both"),
        (0 < cfg.fit.significance < 1, "fit.significance must lie in (0, 1)"),
        (cfg.fit.weights == "uniform", "fit.weights: only 'uniform' is supported"),
        (cfg.noise.bins_per_group >= 2, "noise.bins_per_group must be >= 2"),
        (cfg.noise.tol > 0 and cfg.noise.max_iter >= 1, "noise.tol must be > 0 and noise.max_iter >= 1"),
        (0 < cfg.table.eta_min_cm3 < cfg.table.eta_max_cm3, "table: need 0 < eta_min_cm3 < eta_max_cm3"),
        (cfg.table.n_eta >= 2 and cfg.table.polar_n_theta >= 2 and cfg.table.polar_n_r >= 2,
         "table: grid sizes must be >= 2"),
        (cfg.table.polar_f_prime_V_per_cm_per_us > 0 and cfg.table.polar_r_max_um > 0,
         "table: polar slew rate and radius must be > 0"),
        (all(f > 0 for f in cfg.table.f_prime_grid_V_per_cm_per_us),
         "table.f_prime_grid_V_per_cm_per_us must hold positive slew rates"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


_SECTIONS = {
    "physics": PhysicsConfig,
    "simulation": SimulationConfig,
    "fit": FitConfig,
    "noise": NoiseAnalysisConfig,
    "table": TableConfig,
    "io": IOConfig,
}
_SUBSECTIONS = {("simulation", "detection"): DetectionConfig, ("simulation", "noise"): NoiseConfig}


def _coerce(path: str, default, value):
    """Check ``value`` against the type of the default it replaces."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        if not math.isfinite(value):
            raise ConfigError(f"{path}: must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of numbers")
        return tuple(float(v) for v in value)
    raise ConfigError(f"{path}: unsupported value")


def _build(cls, table: dict, prefix: str, nested: dict):
    defaults = cls()
    known = {f for f in defaults.__dataclass_fields__}
    kwargs = {}
    for key, value in table.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown key {path!r}")
        sub = nested.get(key)
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            kwargs[key] = _build(sub, value, path, {})
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{path}: unexpected table")
            kwargs[key] = _coerce(path, getattr(defaults, key), value)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    kwargs = {}
    for key, value in raw.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError("seed: expected a non-negative integer")
            kwargs["seed"] = value
            continue
        cls = _SECTIONS.get(key)
        if cls is None:
            raise ConfigError(f"unknown key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table")
        nested = {sub: c for (sec, sub), c in _SUBSECTIONS.items() if sec == key}
        kwargs[key] = _build(cls, value, key, nested)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML file; ``None`` gives the built-in defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)
