"""Nominal single-track vehicle model with Magic Formula lateral tires.

All array-level functions broadcast over leading dimensions: a state is any
array whose last axis has the 8 entries ``X, Y, phi, vx, vy, omega, T, delta``
and a control rate has the 2 entries ``dT, ddelta`` (increments per step).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

VX_FLOOR = 0.5  # m/s, slip angles divide by vx

NX = 8
NU = 2
IX, IY, IPHI, IVX, IVY, IOMEGA, IT, IDELTA = range(NX)
VELOCITY_ROWS = (IVX, IVY, IOMEGA)


class VehicleState(NamedTuple):
    X: float
    Y: float
    phi: float
    vx: float
    vy: float
    omega: float
    T: float
    delta: float


class ControlRate(NamedTuple):
    dT: float
    ddelta: float


class FeatureVector(NamedTuple):
    alpha_f: float
    alpha_r: float
    T: float


class ModelError(ValueError):
    """Raised when the nominal model produces a non-finite term."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1300.0
    Iz: float = 1900.0
    lf: float = 1.10
    lr: float = 1.50
    Cw: float = 0.40
    kappa: float = 0.6
    r_wheel: float = 0.30
    Cfr: float = 90.0
    Crr: float = 60.0

    def __post_init__(self):
        for name in ("m", "Iz", "lf", "lr", "r_wheel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        for name in ("Cw", "Cfr", "Crr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")


@dataclass(frozen=True)
class TireParams:
    Bf: float = 16.0
    Cf: float = 1.35
    Df: float = 7350.0
    Br: float = 18.0
    Cr: float = 1.35
    Dr: float = 5400.0

    def __post_init__(self):
        for axle in ("f", "r"):
            B, C, D = (getattr(self, p + axle) for p in "BCD")
            if not B > 0:
                raise ValueError(f"B{axle} must be positive")
            if not 0 < C <= 2:
                raise ValueError(f"C{axle} must lie in (0, 2]")
            # D = 0 is allowed so that tire forces can be switched off in tests
            if not D >= 0:
                raise ValueError(f"D{axle} must be nonnegative")


def _read_key_values(path) -> dict[str, float]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'name = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = float(value)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: value for {key!r} is not a number") from None
    return out


def load_params(path) -> tuple[VehicleParams, TireParams]:
    """Read a flat ``name = value`` file holding vehicle and tire parameters.

    Missing names keep their defaults; unknown names are an error.
    """
    values = _read_key_values(path)
    vnames = {f.name for f in fields(VehicleParams)}
    tnames = {f.name for f in fields(TireParams)}
    unknown = set(values) - vnames - tnames
    if unknown:
        raise ValueError(f"{path}: unknown parameter(s) {sorted(unknown)}")
    vehicle = VehicleParams(**{k: v for k, v in values.items() if k in vnames})
    tires = TireParams(**{k: v for k, v in values.items() if k in tnames})
    return vehicle, tires


def dump_params(vehicle: VehicleParams, tires: TireParams) -> str:
    lines = ["# vehicle"] + [f"{k} = {v!r}" for k, v in asdict(vehicle).items()]
    lines += ["# tires"] + [f"{k} = {v!r}" for k, v in asdict(tires).items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# force model


def _clamped_vx(vx):
    vx = np.asarray(vx, dtype=float)
    return np.maximum(vx, VX_FLOOR), vx <= VX_FLOOR


def slip_angles(state, params: VehicleParams):
    """Front and rear slip angles from the kinematic relations.

    Below ``VX_FLOOR`` the longitudinal speed is clamped; use
    :func:`slip_angles_checked` to also get the clamp flag.
    """
    return slip_angles_checked(state, params)[:2]


def slip_angles_checked(state, params: VehicleParams):
    x = np.asarray(state, dtype=float)
    vxc, clamped = _clamped_vx(x[..., IVX])
    vy, omega, delta = x[..., IVY], x[..., IOMEGA], x[..., IDELTA]
    alpha_f = delta - np.arctan((vy + params.lf * omega) / vxc)
    alpha_r = np.arctan((-vy + params.lr * omega) / vxc)
    return alpha_f, alpha_r, clamped


def magic_formula(alpha, B, C, D):
    return D * np.sin(C * np.arctan(B * alpha))


def magic_formula_slope(alpha, B, C, D):
    Ba = B * alpha
    return D * np.cos(C * np.arctan(Ba)) * C * B / (1.0 + Ba * Ba)


def lateral_tire_forces(alpha_f, alpha_r, tires: TireParams):
    F_fy = magic_formula(np.asarray(alpha_f, dtype=float), tires.Bf, tires.Cf, tires.Df)
    F_ry = magic_formula(np.asarray(alpha_r, dtype=float), tires.Br, tires.Cr, tires.Dr)
    return F_fy, F_ry


def longitudinal_forces(T, params: VehicleParams):
    T = np.asarray(T, dtype=float)
    F_fx = params.kappa * T / params.r_wheel - params.Cfr
    F_rx = (1.0 - params.kappa) * T / params.r_wheel - params.Crr
    return F_fx, F_rx


def tire_forces(state, params: VehicleParams, tires: TireParams):
    """Return ``(F_fx, F_fy, F_rx, F_ry)`` for the given state(s)."""
    x = np.asarray(state, dtype=float)
    alpha_f, alpha_r = slip_angles(x, params)
    F_fy, F_ry = lateral_tire_forces(alpha_f, alpha_r, tires)
    F_fx, F_rx = longitudinal_forces(x[..., IT], params)
    return F_fx, F_fy, F_rx, F_ry


def extract_features(state, params: VehicleParams):
    """Residual-model features ``[alpha_f, alpha_r, T]`` (last axis of size 3)."""
    x = np.asarray(state, dtype=float)
    alpha_f, alpha_r = slip_angles(x, params)
    return np.stack([alpha_f, alpha_r, x[..., IT]], axis=-1)


# ---------------------------------------------------------------------------
# continuous dynamics


def velocity_accelerations(forces, state, params: VehicleParams):
    """Velocity-state accelerations from the four tire forces (drag included)."""
    F_fx, F_fy, F_rx, F_ry = forces
    x = np.asarray(state, dtype=float)
    vx, vy, omega, delta = x[..., IVX], x[..., IVY], x[..., IOMEGA], x[..., IDELTA]
    sd, cd = np.sin(delta), np.cos(delta)
    F_d = params.Cw * vx * vx
    dvx = (F_rx - F_d - F_fy * sd + F_fx * cd) / params.m + vy * omega
    dvy = (F_ry + F_fy * cd + F_fx * sd) / params.m - vx * omega
    domega = ((F_fy * cd + F_fx * sd) * params.lf - F_ry * params.lr) / params.Iz
    return dvx, dvy, domega


def kinematic_rates(state):
    x = np.asarray(state, dtype=float)
    phi, vx, vy, omega = x[..., IPHI], x[..., IVX], x[..., IVY], x[..., IOMEGA]
    c, s = np.cos(phi), np.sin(phi)
    return vx * c - vy * s, vx * s + vy * c, omega


def nominal_derivative(state, rate, params: VehicleParams, tires: TireParams):
    """Time derivative of the 8-state nominal model.

    ``rate`` is taken as the time derivative of ``(T, delta)`` over the
    interval; :func:`integrate_step` converts per-step increments to rates.
    """
    x = np.asarray(state, dtype=float)
    u = np.asarray(rate, dtype=float)
    forces = tire_forces(x, params, tires)
    dX, dY, dphi = kinematic_rates(x)
    dvx, dvy, domega = velocity_accelerations(forces, x, params)
    out = np.stack(
        np.broadcast_arrays(dX, dY, dphi, dvx, dvy, domega, u[..., 0], u[..., 1]), axis=-1
    )
    if not np.all(np.isfinite(out)):
        names = ("Xdot", "Ydot", "phidot", "vxdot", "vydot", "omegadot", "Tdot", "deltadot")
        bad = [n for n, ok in zip(names, np.isfinite(out).reshape(-1, NX).all(axis=0)) if not ok]
        raise ModelError(f"non-finite derivative term(s): {bad}")
    return out


def nominal_jacobian(state, rate, params: VehicleParams, tires: TireParams):
    """Analytic Jacobians ``(df/dx, df/drate)`` of :func:`nominal_derivative`."""
    x = np.asarray(state, dtype=float)
    shape = x.shape[:-1]
    phi, vx, vy, omega, T, delta = (x[..., i] for i in (IPHI, IVX, IVY, IOMEGA, IT, IDELTA))
    p = params
    vxc, clamped = _clamped_vx(vx)
    dvxc = np.where(clamped, 0.0, 1.0)

    a = (vy + p.lf * omega) / vxc
    b = (-vy + p.lr * omega) / vxc
    alpha_f = delta - np.arctan(a)
    alpha_r = np.arctan(b)
    ga = 1.0 / ((1.0 + a * a) * vxc)
    gb = 1.0 / ((1.0 + b * b) * vxc)

    def grad(entries):
        g = np.zeros(shape + (NX,))
        for idx, val in entries.items():
            g[..., idx] = val
        return g

    d_alpha_f = grad({IVX: a * ga * dvxc, IVY: -ga, IOMEGA: -p.lf * ga, IDELTA: 1.0})
    d_alpha_r = grad({IVX: -b * gb * dvxc, IVY: -gb, IOMEGA: p.lr * gb})

    F_fy = magic_formula(alpha_f, tires.Bf, tires.Cf, tires.Df)
    F_ry = magic_formula(alpha_r, tires.Br, tires.Cr, tires.Dr)
    d_F_fy = magic_formula_slope(alpha_f, tires.Bf, tires.Cf, tires.Df)[..., None] * d_alpha_f
    d_F_ry = magic_formula_slope(alpha_r, tires.Br, tires.Cr, tires.Dr)[..., None] * d_alpha_r
    F_fx, F_rx = longitudinal_forces(T, p)
    d_F_fx = grad({IT: p.kappa / p.r_wheel})
    d_F_rx = grad({IT: (1.0 - p.kappa) / p.r_wheel})

    sd, cd = np.sin(delta), np.cos(delta)
    d_sd = grad({IDELTA: cd})
    d_cd = grad({IDELTA: -sd})
    e = lambda v: v[..., None]  # noqa: E731

    J = np.zeros(shape + (NX, NX))
    c, s = np.cos(phi), np.sin(phi)
    J[..., IX, IPHI] = -vx * s - vy * c
    J[..., IX, IVX] = c
    J[..., IX, IVY] = -s
    J[..., IY, IPHI] = vx * c - vy * s
    J[..., IY, IVX] = s
    J[..., IY, IVY] = c
    J[..., IPHI, IOMEGA] = 1.0

    lat_front = e(F_fy) * d_cd + e(cd) * d_F_fy + e(F_fx) * d_sd + e(sd) * d_F_fx
    J[..., IVX, :] = (
        d_F_rx - grad({IVX: 2.0 * p.Cw * vx})
        - e(F_fy) * d_sd - e(sd) * d_F_fy
        + e(F_fx) * d_cd + e(cd) * d_F_fx
    ) / p.m + grad({IVY: omega, IOMEGA: vy})
    J[..., IVY, :] = (d_F_ry + lat_front) / p.m - grad({IVX: omega, IOMEGA: vx})
    J[..., IOMEGA, :] = (lat_front * p.lf - d_F_ry * p.lr) / p.Iz

    Ju = np.zeros(shape + (NX, NU))
    Ju[..., IT, 0] = 1.0
    Ju[..., IDELTA, 1] = 1.0
    return J, Ju


# ---------------------------------------------------------------------------
# discretization


def integrate_step(state, rate, params: VehicleParams, tires: TireParams, dt: float):
    """One classical RK4 step; ``rate`` holds per-step increments (dT, ddelta)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(state, dtype=float)
    v = np.asarray(rate, dtype=float) / dt
    k1 = nominal_derivative(x, v, params, tires)
    k2 = nominal_derivative(x + 0.5 * dt * k1, v, params, tires)
    k3 = nominal_derivative(x + 0.5 * dt * k2, v, params, tires)
    k4 = nominal_derivative(x + dt * k3, v, params, tires)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def linearize_discretize(op_state, op_rate, params: VehicleParams, tires: TireParams, dt: float):
    """Affine model ``x+ = A x + B u + c`` of the RK4 map at an operating point.

    A and B are the exact Jacobians of :func:`integrate_step`, obtained by
    propagating the analytic continuous Jacobian through the RK4 stages.
    Broadcasts over leading dimensions of ``op_state``/``op_rate``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(op_state, dtype=float)
    u = np.asarray(op_rate, dtype=float)
    lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, lead + (NX,))
    u = np.broadcast_to(u, lead + (NU,))
    v = u / dt
    eye = np.broadcast_to(np.eye(NX), x.shape[:-1] + (NX, NX))

    stages_x = [x]
    ks = []
    dxs = [eye]
    dus = [np.zeros(x.shape[:-1] + (NX, NU))]
    dks_x, dks_u = [], []
    weights = (0.5 * dt, 0.5 * dt, dt)
    for i in range(4):
        xi = stages_x[i]
        k = nominal_derivative(xi, v, params, tires)
        Jx, Ju = nominal_jacobian(xi, v, params, tires)
        dk_x = Jx @ dxs[i]
        dk_u = Jx @ dus[i] + Ju / dt
        ks.append(k)
        dks_x.append(dk_x)
        dks_u.append(dk_u)
        if i < 3:
            w = weights[i]
            stages_x.append(x + w * k)
            dxs.append(eye + w * dk_x)
            dus.append(w * dk_u)
    x_next = x + dt / 6.0 * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
    A = eye + dt / 6.0 * (dks_x[0] + 2 * dks_x[1] + 2 * dks_x[2] + dks_x[3])
    B = dt / 6.0 * (dks_u[0] + 2 * dks_u[1] + 2 * dks_u[2] + dks_u[3])
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ModelError("non-finite Jacobian entries")
    c = x_next - np.einsum("...ij,...j->...i", A, x) - np.einsum("...ij,...j->...i", B, u)
    return A, B, c


# ---------------------------------------------------------------------------
# error decomposition


def force_deviation_to_state_error(dF, delta, params: VehicleParams, simplified: bool = False):
    """Map tire-force deviations ``(dF_fx, dF_fy, dF_rx, dF_ry)`` to velocity-state errors.

    The exact map is the force part of the nominal dynamics; the simplified
    map drops the ``sin(delta)`` terms and sets ``cos(delta) = 1``.
    """
    dF = np.asarray(dF, dtype=float)
    dF_fx, dF_fy, dF_rx, dF_ry = (dF[..., i] for i in range(4))
    p = params
    if simplified:
        return np.stack(
            [
                (dF_rx + dF_fx) / p.m,
                (dF_ry + dF_fy) / p.m,
                (dF_fy * p.lf - dF_ry * p.lr) / p.Iz,
            ],
            axis=-1,
        )
    delta = np.asarray(delta, dtype=float)
    sd, cd = np.sin(delta), np.cos(delta)
    return np.stack(
        [
            (dF_fx * cd - dF_fy * sd + dF_rx) / p.m,
            (dF_fx * sd + dF_fy * cd + dF_ry) / p.m,
            ((dF_fx * sd + dF_fy * cd) * p.lf - dF_ry * p.lr) / p.Iz,
        ],
        axis=-1,
    )


def velocity_matrix_form(forces, state, params: VehicleParams):
    """Velocity accelerations via the force-matrix form plus the motion terms."""
    x = np.asarray(state, dtype=float)
    F = np.stack(np.broadcast_arrays(*forces), axis=-1)
    vx, vy, omega = x[..., IVX], x[..., IVY], x[..., IOMEGA]
    forced = force_deviation_to_state_error(F, x[..., IDELTA], params, simplified=False)
    motion = np.stack([vy * omega - params.Cw * vx * vx / params.m, -vx * omega, np.zeros_like(vx)], axis=-1)
    return forced + motion


def steady_torque(vx: float, params: VehicleParams) -> float:
    """Torque that balances drag and rolling resistance in straight running."""
    return (params.Cw * vx * vx + params.Cfr + params.Crr) * params.r_wheel


def wrap_angle(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi
