"""Mismatched plant and closed-loop lap runner.

The plant carries the commanded torque and steering (the same integrator
states the controller sees) plus the actual actuator outputs, which follow
the commands through first-order lags.  Tire forces are derated by a lower
friction peak, a different stiffness, longitudinal load transfer and a
combined-slip ellipse, none of which the nominal model knows about.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import gp as gpmod
from . import mpcc
from .track import Track, contouring_errors, project, query
from .vehicle import (IDELTA, IOMEGA, IT, IVX, IVY, NX, TireParams, VehicleParams, extract_features,
                      integrate_step, kinematic_rates, magic_formula, slip_angles, steady_torque,
                      velocity_accelerations)

G_ACC = 9.81
NP = NX + 2  # plus actual torque and steering
ITA, IDA = NX, NX + 1


@dataclass(frozen=True)
class PlantParams:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    tires: TireParams = field(default_factory=TireParams)
    tire_peak_scale: float = 0.85
    stiffness_scale: float = 1.1
    drag_scale: float = 1.0
    load_transfer: float = 0.15
    combined_slip: float = 1.0
    tau_T: float = 0.08  # s
    tau_delta: float = 0.06  # s
    noise_std: tuple = (0.0, 0.0, 0.0)  # vx, vy, omega
    substep: float = 0.01  # s

    def __post_init__(self):
        if self.tau_T < 0 or self.tau_delta < 0:
            raise ValueError("lag constants must be nonnegative")
        if not self.substep > 0:
            raise ValueError("substep must be positive")
        if len(self.noise_std) != 3 or any(s < 0 for s in self.noise_std):
            raise ValueError("noise_std needs 3 nonnegative values")
        for name in ("tire_peak_scale", "stiffness_scale", "drag_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.load_transfer < 0 or self.combined_slip < 0:
            raise ValueError("load_transfer and combined_slip must be nonnegative")

    def substeps(self, dt: float) -> int:
        n = round(dt / self.substep)
        if n < 1 or abs(n * self.substep - dt) > 1e-9 * dt:
            raise ValueError(f"substep {self.substep} does not divide the control period {dt}")
        return n

    @classmethod
    def degenerate(cls, vehicle=None, tires=None, substep: float = 0.05) -> "PlantParams":
        """A plant that is exactly the nominal model."""
        return cls(vehicle=vehicle or VehicleParams(), tires=tires or TireParams(), tire_peak_scale=1.0,
                   stiffness_scale=1.0, drag_scale=1.0, load_transfer=0.0, combined_slip=0.0,
                   tau_T=0.0, tau_delta=0.0, substep=substep)


def _lag_rate(cmd, act, cmd_rate, tau):
    if tau == 0.0:
        return cmd_rate
    if math.isinf(tau):
        return 0.0
    return (cmd - act) / tau


def plant_derivative(s, rate, plant: PlantParams):
    """Time derivative of the 10-state plant; ``rate`` is ``(dT/dt, ddelta/dt)``."""
    p, t = plant.vehicle, plant.tires
    T_act = s[IT] if plant.tau_T == 0.0 else s[ITA]
    d_act = s[IDELTA] if plant.tau_delta == 0.0 else s[IDA]
    x = s[:NX].copy()
    x[IT], x[IDELTA] = T_act, d_act
    alpha_f, alpha_r = slip_angles(x, p)
    F_fx = p.kappa * T_act / p.r_wheel - p.Cfr
    F_rx = (1.0 - p.kappa) * T_act / p.r_wheel - p.Crr
    drag = plant.drag_scale * p.Cw * x[IVX] ** 2
    ax = (F_fx + F_rx - drag) / p.m
    shift = plant.load_transfer * ax / G_ACC
    Df = t.Df * plant.tire_peak_scale * max(1.0 - shift, 0.0)
    Dr = t.Dr * plant.tire_peak_scale * max(1.0 + shift, 0.0)
    F_fy = magic_formula(alpha_f, t.Bf * plant.stiffness_scale, t.Cf, Df)
    F_ry = magic_formula(alpha_r, t.Br * plant.stiffness_scale, t.Cr, Dr)
    if plant.combined_slip > 0:
        F_fx = float(np.clip(F_fx, -Df, Df))
        F_rx = float(np.clip(F_rx, -Dr, Dr))
        F_fy *= math.sqrt(max(0.0, 1.0 - plant.combined_slip * (F_fx / Df) ** 2)) if Df > 0 else 0.0
        F_ry *= math.sqrt(max(0.0, 1.0 - plant.combined_slip * (F_rx / Dr) ** 2)) if Dr > 0 else 0.0
    # the shared formula applies the nominal drag; any extra goes through
    # the rear longitudinal force, which only enters the vx row
    dvx, dvy, domega = velocity_accelerations(
        (F_fx, F_fy, F_rx - (plant.drag_scale - 1.0) * p.Cw * x[IVX] ** 2, F_ry), x, p)
    dX, dY, dphi = kinematic_rates(x)
    return np.array([
        dX, dY, dphi, dvx, dvy, domega, rate[0], rate[1],
        _lag_rate(s[IT], s[ITA], rate[0], plant.tau_T),
        _lag_rate(s[IDELTA], s[IDA], rate[1], plant.tau_delta),
    ], dtype=float)


def plant_state(x) -> np.ndarray:
    """Plant state with actuators settled at the commanded values."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, [x[IT], x[IDELTA]]])


def plant_step(s, command, plant: PlantParams, dt: float, rng: np.random.Generator | None = None):
    """Advance one control period; returns ``(next plant state, observation)``.

    The observation is the 8-state measurement with optional noise on the
    velocity rows.
    """
    n = plant.substeps(dt)
    h = dt / n
    v = np.asarray(command, dtype=float) / dt
    s = np.asarray(s, dtype=float).copy()
    for _ in range(n):
        k1 = plant_derivative(s, v, plant)
        k2 = plant_derivative(s + 0.5 * h * k1, v, plant)
        k3 = plant_derivative(s + 0.5 * h * k2, v, plant)
        k4 = plant_derivative(s + h * k3, v, plant)
        s = s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    obs = s[:NX].copy()
    if rng is not None and any(plant.noise_std):
        obs[[IVX, IVY, IOMEGA]] += rng.normal(size=3) * np.asarray(plant.noise_std)
    return s, obs


def steady_lateral_force(alpha, plant: PlantParams, axle: str = "f"):
    """Plant lateral force at slip ``alpha`` with no longitudinal force or load shift."""
    t = plant.tires
    B, C, D = (t.Bf, t.Cf, t.Df) if axle == "f" else (t.Br, t.Cr, t.Dr)
    return magic_formula(alpha, B * plant.stiffness_scale, C, D * plant.tire_peak_scale)


# ---------------------------------------------------------------------------
# lap runner


LOG_COLUMNS = (
    ["lap", "step", "time", "theta"]
    + ["X", "Y", "phi", "vx", "vy", "omega", "T", "delta"]
    + ["dT", "ddelta"]
    + ["vx_next", "vy_next", "omega_next"]
    + ["alpha_f", "alpha_r", "z_T"]
    + ["gp_mean_vx", "gp_mean_vy", "gp_mean_omega", "gp_var_vx", "gp_var_vy", "gp_var_omega"]
    + ["y_vx", "y_vy", "y_omega", "e_vy_nom", "e_omega_nom", "e_vy_gp", "e_omega_gp"]
    + ["e_c", "slack_max", "qp_status", "qp_iterations", "inserted"]
)


class StepLog:
    """Column store for step records; every row is self-contained."""

    def __init__(self, rows: list | None = None):
        self.rows = rows if rows is not None else []

    def append(self, row: dict):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def states(self) -> np.ndarray:
        return np.array([[r[k] for k in ("X", "Y", "phi", "vx", "vy", "omega", "T", "delta")]
                         for r in self.rows], dtype=float).reshape(-1, NX)

    def commands(self) -> np.ndarray:
        return np.array([[r["dT"], r["ddelta"]] for r in self.rows], dtype=float).reshape(-1, 2)

    def next_velocities(self) -> np.ndarray:
        return np.array([[r["vx_next"], r["vy_next"], r["omega_next"]] for r in self.rows],
                        dtype=float).reshape(-1, 3)

    def extend(self, other: "StepLog"):
        self.rows.extend(other.rows)


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_log(log: StepLog, fh) -> None:
    fh.write(",".join(LOG_COLUMNS) + "\n")
    for r in log.rows:
        fh.write(",".join(format_cell(r[c]) for c in LOG_COLUMNS) + "\n")


def read_log(fh) -> StepLog:
    header = fh.readline().strip().split(",")
    missing = [c for c in LOG_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"step log is missing columns {missing}")
    rows = []
    for line in fh:
        if not line.strip():
            continue
        cells = line.rstrip("\n").split(",")
        if len(cells) != len(header):
            raise ValueError(f"step log row has {len(cells)} cells, expected {len(header)}")
        row = {}
        for k, v in zip(header, cells):
            row[k] = v if k == "qp_status" else float(v)
        rows.append(row)
    return StepLog(rows)


class ErrorStats(NamedTuple):
    e_vy_nom: tuple  # (mean, std)
    e_omega_nom: tuple
    e_vy_gp: tuple | None
    e_omega_gp: tuple | None


def model_error_stats(log: StepLog, model: gpmod.GpModel | None, params: VehicleParams,
                      tires: TireParams, dt: float) -> ErrorStats:
    """Mean and std of ``|x+ - f(x, u)|`` in vy and omega, with and without the GP."""
    if len(log) == 0:
        raise ValueError("empty step log")
    x = log.states()
    u = log.commands()
    nxt = log.next_velocities()
    pred = integrate_step(x, u, params, tires, dt)[:, [IVX, IVY, IOMEGA]]
    err = nxt - pred
    e_nom = np.abs(err)
    stats = lambda e: (float(np.mean(e)), float(np.std(e)))
    if model is None:
        return ErrorStats(stats(e_nom[:, 1]), stats(e_nom[:, 2]), None, None)
    g = gpmod.predict(model, extract_features(x, params)).mean
    e_gp = np.abs(err - g)
    return ErrorStats(stats(e_nom[:, 1]), stats(e_nom[:, 2]), stats(e_gp[:, 1]), stats(e_gp[:, 2]))


@dataclass
class LapMetrics:
    lap: int
    lap_time: float
    completed: bool
    max_ay_g: float
    avg_speed: float
    dict_updates: int
    dict_size: int
    e_vy_nom: tuple
    e_omega_nom: tuple
    e_vy_gp: tuple | None
    e_omega_gp: tuple | None
    steps: int
    held_steps: int
    slack_free_fraction: float  # share of steps with max slack below 1e-3

    def as_record(self) -> dict:
        rec = {}
        for k, v in self.__dict__.items():
            if isinstance(v, tuple):
                rec[k + "_mean"], rec[k + "_std"] = v
            elif v is None:
                rec[k + "_mean"], rec[k + "_std"] = None, None
            else:
                rec[k] = v
        return rec


@dataclass(frozen=True)
class LapSettings:
    start_speed: float = 10.0
    start_offset: float = 0.3  # m, max random lateral offset at the start
    max_held: int = 10
    max_time_factor: float = 4.0  # lap aborts after this many track-length/start-speed
    learning: bool = True
    gamma_threshold: float | None = None


def start_state(track: Track, speed: float, params: VehicleParams, rng: np.random.Generator | None,
                offset_max: float = 0.0) -> np.ndarray:
    X, Y, phi = (float(v) for v in query(track, 0.0))
    off = 0.0 if rng is None else float(rng.uniform(-offset_max, offset_max))
    # positive offset to the left of the centerline
    X -= off * math.sin(phi)
    Y += off * math.cos(phi)
    return np.array([X, Y, phi, speed, 0.0, 0.0, steady_torque(speed, params), 0.0])


def run_lap(config: mpcc.MpccConfig, plant: PlantParams, track: Track, model: gpmod.GpModel | None,
            dataset: gpmod.GpDataset, hyp: gpmod.GpHyperparams, settings: LapSettings = LapSettings(),
            lap: int = 1, rng: np.random.Generator | None = None, nominal: tuple | None = None):
    """Drive one lap from the start line; returns ``(metrics, log, dataset)``.

    ``nominal`` is the controller's ``(VehicleParams, TireParams)``; by
    default the plant's base parameters.  Each step's sample is offered to
    the dictionary when learning is on; the model itself is not refit here.
    """
    params, tires = nominal or (plant.vehicle, plant.tires)
    dt = config.dt
    plant.substeps(dt)
    limits = config.limits
    x = start_state(track, settings.start_speed, params, rng, settings.start_offset)
    s = plant_state(x)
    obs = x.copy()
    warm = mpcc.initial_warm_start(obs, track, config, params, theta=project(track, x[0], x[1], 0.0))
    theta_prev = project(track, s[0], s[1], 0.0)
    if track.closed and theta_prev > 0.5 * track.theta_max:
        theta_prev -= track.theta_max  # started just behind the line
    log = StepLog()
    t = 0.0
    held_run = 0
    held_total = 0
    updates = 0
    lap_time = math.nan
    completed = False
    max_steps = int(settings.max_time_factor * track.theta_max / max(settings.start_speed, 1.0) / dt)
    for k in range(max_steps):
        try:
            cmd, warm, diag = mpcc.step(obs, track, model, config, warm, params, tires)
        except (ValueError, np.linalg.LinAlgError):
            break
        held_run = held_run + 1 if diag.held else 0
        held_total += int(diag.held)
        if held_run > settings.max_held:
            break
        s_next, obs_next = plant_step(s, cmd, plant, dt, rng)
        nominal_next = integrate_step(obs, cmd, params, tires, dt)
        y = (obs_next - nominal_next)[[IVX, IVY, IOMEGA]]
        z = extract_features(obs, params)
        g_mean = diag.gp_mean[0]
        g_var = diag.gp_var[0]
        inserted = False
        if settings.learning:
            valid = gpmod.feature_validity(z, params, tires, limits).valid
            dataset, rep = gpmod.maybe_insert(dataset, z, y, hyp, settings.gamma_threshold, valid=valid)
            inserted = rep.accepted
            updates += int(inserted)
        theta_meas = project(track, s_next[0], s_next[1], theta_prev)
        _, e_c = contouring_errors(s_next[0], s_next[1], track, theta_meas)
        # progress since the start, unwrapped across the finish line
        gain = theta_meas - float(track.wrap(theta_prev))
        if track.closed and abs(gain) > 0.5 * track.theta_max:
            gain -= math.copysign(track.theta_max, gain)
        theta_next = theta_prev + gain
        log.append({
            "lap": lap, "step": k, "time": t, "theta": theta_prev,
            **dict(zip(("X", "Y", "phi", "vx", "vy", "omega", "T", "delta"), obs)),
            "dT": cmd[0], "ddelta": cmd[1],
            "vx_next": obs_next[IVX], "vy_next": obs_next[IVY], "omega_next": obs_next[IOMEGA],
            "alpha_f": z[0], "alpha_r": z[1], "z_T": z[2],
            "gp_mean_vx": g_mean[0], "gp_mean_vy": g_mean[1], "gp_mean_omega": g_mean[2],
            "gp_var_vx": g_var[0], "gp_var_vy": g_var[1], "gp_var_omega": g_var[2],
            "y_vx": y[0], "y_vy": y[1], "y_omega": y[2],
            "e_vy_nom": abs(y[1]), "e_omega_nom": abs(y[2]),
            "e_vy_gp": abs(y[1] - g_mean[1]), "e_omega_gp": abs(y[2] - g_mean[2]),
            "e_c": float(e_c), "slack_max": diag.slack_max, "qp_status": diag.status,
            "qp_iterations": diag.iterations, "inserted": inserted,
        })
        t += dt
        s, obs = s_next, obs_next
        if theta_next >= track.theta_max:
            # interpolate the finish-line crossing inside the last period
            lap_time = t - dt + dt * (track.theta_max - theta_prev) / max(gain, 1e-12)
            completed = True
            break
        theta_prev = theta_next
    metrics = lap_metrics(log, lap, lap_time if completed else t, completed, updates, len(dataset),
                          model, params, tires, dt, held_total)
    return metrics, log, dataset


def lap_metrics(log: StepLog, lap: int, lap_time: float, completed: bool, updates: int, dict_size: int,
                model, params, tires, dt, held_steps: int = 0) -> LapMetrics:
    if len(log) == 0:
        nan2 = (math.nan, math.nan)
        return LapMetrics(lap, lap_time, completed, math.nan, math.nan, updates, dict_size, nan2, nan2,
                          None, None, 0, held_steps, math.nan)
    stats = model_error_stats(log, model, params, tires, dt)
    vx = log.column("vx")
    ay = np.abs(log.column("vx") * log.column("omega") + np.diff(
        np.append(log.column("vy"), log.rows[-1]["vy_next"])) / dt) / G_ACC
    slack = log.column("slack_max")
    return LapMetrics(
        lap=lap, lap_time=float(lap_time), completed=completed, max_ay_g=float(np.max(ay)),
        avg_speed=float(np.mean(vx)), dict_updates=updates, dict_size=dict_size,
        e_vy_nom=stats.e_vy_nom, e_omega_nom=stats.e_omega_nom, e_vy_gp=stats.e_vy_gp,
        e_omega_gp=stats.e_omega_gp, steps=len(log), held_steps=held_steps,
        slack_free_fraction=float(np.mean(slack < 1e-3)),
    )
