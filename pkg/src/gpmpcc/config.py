"""Experiment configuration: one INI file with five sections.

``[paths]``      track CSV, vehicle parameter file, output directory
``[controller]`` MpccConfig fields (speed bounds come from the protocol)
``[gp]``         GpHyperparams fields plus ``budget`` and ``gamma_threshold``
``[plant]``      PlantParams perturbations (base parameters come from ``[paths]``)
``[protocol]``   laps, learning schedule, speed limit, seed, start conditions

Tuple-valued keys are written as comma-separated numbers.  Relative paths
are resolved against the directory of the config file; an empty ``track``
or ``vehicle`` selects the built-in benchmark track / default vehicle.
"""

from __future__ import annotations

import configparser
import io
import math
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import gp as gpmod
from .mpcc import MpccConfig
from .sim import LapSettings, PlantParams
from .track import Track, benchmark_track, load_centerline
from .vehicle import TireParams, VehicleParams, load_params


class ConfigError(ValueError):
    """Raised with every problem found, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass(frozen=True)
class PathsConfig:
    track: str = ""
    vehicle: str = ""
    output: str = "runs/default"


_HYP = gpmod.GpHyperparams()


@dataclass(frozen=True)
class GpConfig:
    lengthscales: tuple = _HYP.lengthscales
    sigma_f2: float = _HYP.sigma_f2
    sigma_n2: tuple = _HYP.sigma_n2
    output_scale: tuple = _HYP.output_scale
    jitter: float = _HYP.jitter
    budget: int = 100
    gamma_threshold: float = gpmod.DEFAULT_GAMMA

    @property
    def hyperparams(self) -> gpmod.GpHyperparams:
        return gpmod.GpHyperparams(self.lengthscales, self.sigma_f2, self.sigma_n2, self.output_scale, self.jitter)


_PLANT = PlantParams()


@dataclass(frozen=True)
class PlantConfig:
    tire_peak_scale: float = _PLANT.tire_peak_scale
    stiffness_scale: float = _PLANT.stiffness_scale
    drag_scale: float = _PLANT.drag_scale
    load_transfer: float = _PLANT.load_transfer
    combined_slip: float = _PLANT.combined_slip
    tau_T: float = _PLANT.tau_T
    tau_delta: float = _PLANT.tau_delta
    noise_std: tuple = _PLANT.noise_std
    substep: float = _PLANT.substep

    def params(self, vehicle: VehicleParams, tires: TireParams) -> PlantParams:
        return PlantParams(vehicle=vehicle, tires=tires, **{f.name: getattr(self, f.name) for f in fields(self)})


@dataclass(frozen=True)
class ProtocolConfig:
    laps: int = 6
    nominal_laps: int = 1  # laps driven without a GP before the first refit
    learning: bool = True  # offer samples to the dictionary
    speed_limit: float = 30.0  # m/s
    seed: int = 0
    start_speed: float = 10.0
    start_offset: float = 0.3
    track_radius: float = 4.5
    max_held: int = 10

    def lap_settings(self, gamma_threshold: float) -> LapSettings:
        return LapSettings(start_speed=self.start_speed, start_offset=self.start_offset,
                           max_held=self.max_held, learning=self.learning, gamma_threshold=gamma_threshold)


_CONTROLLER_SKIP = ("v_max", "vs_max")  # driven by protocol.speed_limit


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    controller: MpccConfig = field(default_factory=MpccConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    @property
    def mpcc(self) -> MpccConfig:
        v = self.protocol.speed_limit
        return replace(self.controller, v_max=v, vs_max=v)

    def vehicle(self) -> tuple[VehicleParams, TireParams]:
        if self.paths.vehicle:
            return load_params(self.paths.vehicle)
        return VehicleParams(), TireParams()

    def track(self) -> Track:
        if self.paths.track:
            return load_centerline(self.paths.track, closed=True, R=self.protocol.track_radius)
        return benchmark_track(R=self.protocol.track_radius)

    def plant_params(self) -> PlantParams:
        return self.plant.params(*self.vehicle())

    def with_overrides(self, *, seed=None, laps=None, output=None) -> "ExperimentConfig":
        proto = self.protocol
        if seed is not None:
            proto = replace(proto, seed=int(seed))
        if laps is not None:
            proto = replace(proto, laps=int(laps))
        paths = self.paths if output is None else replace(self.paths, output=str(output))
        cfg = replace(self, protocol=proto, paths=paths)
        validate(cfg)
        return cfg


_SECTIONS = {
    "paths": PathsConfig,
    "controller": MpccConfig,
    "gp": GpConfig,
    "plant": PlantConfig,
    "protocol": ProtocolConfig,
}


def _section_fields(name, cls):
    return [f for f in fields(cls) if not (name == "controller" and f.name in _CONTROLLER_SKIP)]


def _kind(cls, f):
    hint = typing.get_type_hints(cls)[f.name]
    if hint is tuple or typing.get_origin(hint) is tuple:
        return tuple
    return hint


def _parse_value(kind, raw: str):
    raw = raw.strip()
    if kind is tuple:
        return tuple(float(v) for v in raw.split(","))
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, base_dir: Path | str | None = None, check_files: bool = True) -> ExperimentConfig:
    """Parse INI text; every problem is collected before raising ConfigError."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"malformed config: {exc}"]) from None
    problems = []
    for sec in cp.sections():
        if sec not in _SECTIONS:
            problems.append(f"[{sec}]: unknown section (expected one of {', '.join(_SECTIONS)})")
    blocks = {}
    for name, cls in _SECTIONS.items():
        known = {f.name: f for f in _section_fields(name, cls)}
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in known:
                    hint = " (set protocol.speed_limit instead)" if key in _CONTROLLER_SKIP else ""
                    problems.append(f"[{name}] {key}: unknown key{hint}")
                    continue
                try:
                    values[key] = _parse_value(_kind(cls, known[key]), raw)
                except ValueError as exc:
                    problems.append(f"[{name}] {key}: {exc}")
        blocks[name] = values
    base = Path(base_dir) if base_dir is not None else None
    for key in ("track", "vehicle", "output"):
        v = blocks["paths"].get(key)
        if v and base is not None and not Path(v).is_absolute():
            blocks["paths"][key] = str((base / v).resolve())
    built = {}
    for name, cls in _SECTIONS.items():
        try:
            built[name] = cls(**blocks[name])
        except (TypeError, ValueError) as exc:
            problems.append(f"[{name}]: {exc}")
            built[name] = cls()  # keep checking the other sections
    cfg = ExperimentConfig(**built)
    problems += find_problems(cfg, check_files=check_files)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: ExperimentConfig, check_files: bool = True) -> None:
    problems = find_problems(cfg, check_files)
    if problems:
        raise ConfigError(problems)


def find_problems(cfg: ExperimentConfig, check_files: bool = True) -> list[str]:
    problems = []
    p = cfg.protocol
    if p.laps < 1:
        problems.append("[protocol] laps: must be at least 1")
    if p.nominal_laps < 1:
        problems.append("[protocol] nominal_laps: must be at least 1 (the baseline lap)")
    if not (p.speed_limit > 0 and math.isfinite(p.speed_limit)):
        problems.append("[protocol] speed_limit: must be positive")
    if not p.start_speed > 0.5:
        problems.append("[protocol] start_speed: must exceed the slip-angle floor (0.5 m/s)")
    if p.start_offset < 0:
        problems.append("[protocol] start_offset: must be nonnegative")
    if not p.track_radius > cfg.controller.track_margin:
        problems.append("[protocol] track_radius: must exceed controller.track_margin")
    if p.max_held < 0:
        problems.append("[protocol] max_held: must be nonnegative")
    if cfg.gp.budget < 1:
        problems.append("[gp] budget: must be at least 1")
    if not cfg.gp.gamma_threshold >= 0:
        problems.append("[gp] gamma_threshold: must be nonnegative")
    try:
        cfg.gp.hyperparams
    except ValueError as exc:
        problems.append(f"[gp]: {exc}")
    try:
        cfg.plant.params(VehicleParams(), TireParams()).substeps(cfg.controller.dt)
    except ValueError as exc:
        problems.append(f"[plant] substep: {exc}")
    if check_files:
        for key in ("track", "vehicle"):
            v = getattr(cfg.paths, key)
            if v and not Path(v).is_file():
                problems.append(f"[paths] {key}: file not found: {v}")
    return problems


def load_config(path, check_files: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    return parse_config(text, base_dir=path.parent, check_files=check_files)


def dump_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, cls in _SECTIONS.items():
        block = getattr(cfg, name)
        cp[name] = {f.name: _format_value(getattr(block, f.name)) for f in _section_fields(name, cls)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
