"""Model predictive contouring control with a GP residual, one QP per step.

Augmented state ``[X, Y, phi, vx, vy, omega, T, delta, theta]`` and inputs
``[dT, ddelta, vs]``; ``theta`` advances by ``vs * dt``.  Every step the
nominal model is linearized along the warm-start trajectory, the GP mean is
evaluated there and held constant for the solve, and a single structured QP
is solved (real-time iteration).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from . import qp as qpcore
from .gp import RESIDUAL_MAP, GpModel, ValidityLimits, predict
from .track import Track, linearize_errors, project, query
from .vehicle import (IDELTA, IOMEGA, IT, IVX, IVY, NX, VX_FLOOR, TireParams, VehicleParams,
                      extract_features, lateral_tire_forces, linearize_discretize, longitudinal_forces,
                      magic_formula_slope, slip_angles, steady_torque)

NXA = NX + 1  # plus progress
NUA = 3
ITHETA = NX
IDT, IDD, IVS = range(NUA)

ROW_NAMES = ("ellipse_front", "ellipse_rear", "slip_front_hi", "slip_front_lo", "slip_rear_hi",
             "slip_rear_lo", "slip_diff_hi", "slip_diff_lo", "track_left", "track_right", "speed")
N_ROWS = len(ROW_NAMES)
_ELLIPSE_EPS = 1.0  # N, keeps the ellipse norm differentiable at zero force

# variable scales handed to the QP (T in kN m, steering in 0.1 rad, ...)
_X_SCALE = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1000.0, 0.1, 1.0])
_U_SCALE = np.array([100.0, 0.01, 1.0])


@dataclass(frozen=True)
class MpccConfig:
    N: int = 80
    dt: float = 0.05
    q_l: float = 100.0
    q_c: float = 0.5
    q_v: float = 1.0
    Rx: tuple = (0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 0.0, 0.0, 0.0)  # damps vy and omega oscillation
    Ru: tuple = (4e-4, 4e3, 4e-3)
    T_min: float = -3500.0  # N m
    T_max: float = 2000.0
    delta_max: float = 0.45  # rad
    dT_max: float = 500.0  # N m per step
    ddelta_max: float = 0.02  # rad per step
    vs_max: float = 30.0  # m/s
    v_max: float = 30.0  # m/s, soft
    p_long: float = 1.0
    p_ellipse: float = 0.9
    alpha_max: float = 0.12
    dalpha_max: float = 0.06
    track_margin: float = 1.0  # m kept from the edge
    slack_quad: float = 1e3
    slack_lin: float = 1e2
    qp_max_iter: int = 40
    qp_tol: float = 1e-6
    reproject_lag: float = 2.0  # m

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("horizon N must be at least 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(self.Rx) != NXA or len(self.Ru) != NUA:
            raise ValueError(f"Rx needs {NXA} entries and Ru needs {NUA}")
        weights = (self.q_l, self.q_c, *self.Rx, *self.Ru, self.slack_quad, self.slack_lin)
        if any(w < 0 for w in weights):
            raise ValueError("weights must be nonnegative")
        if not self.q_v > 0:
            raise ValueError("q_v must be positive")
        if any(r <= 0 for r in self.Ru):
            raise ValueError("input weights Ru must be positive")
        if not self.T_min < self.T_max:
            raise ValueError("T_min must be below T_max")
        for name in ("delta_max", "dT_max", "ddelta_max", "vs_max", "v_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.slack_quad <= 0 and self.slack_lin <= 0:
            raise ValueError("soft constraints need a positive slack weight")
        ValidityLimits(self.p_long, self.p_ellipse, self.alpha_max, self.dalpha_max)

    @property
    def limits(self) -> ValidityLimits:
        return ValidityLimits(self.p_long, self.p_ellipse, self.alpha_max, self.dalpha_max)


@dataclass
class WarmStart:
    x: np.ndarray  # (N+1, 9)
    u: np.ndarray  # (N, 3)
    last_command: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "WarmStart":
        return WarmStart(self.x.copy(), self.u.copy(), self.last_command.copy())


@dataclass
class ControllerDiagnostics:
    status: str
    iterations: int
    residuals: qpcore.KktResiduals
    slack_max: float
    slacks: np.ndarray  # (N+1, rows), physical-normalized units
    gp_mean: np.ndarray  # (N, 3)
    gp_var: np.ndarray
    margins: np.ndarray  # (N+1, rows), h - G w at the solution
    predicted: np.ndarray  # (N+1, 9)
    held: bool
    reprojected: bool
    comp_time: float


class GpHorizon(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray


# ---------------------------------------------------------------------------


def gp_disturbance_horizon(model: GpModel | None, warm: WarmStart, params: VehicleParams) -> GpHorizon:
    """GP mean and variance at the features of each warm-start stage ``0..N-1``."""
    N = len(warm.u)
    if model is None:
        return GpHorizon(np.zeros((N, 3)), np.zeros((N, 3)))
    z = extract_features(warm.x[:N, :NX], params)
    p = predict(model, z)
    return GpHorizon(p.mean, p.variance)


def slip_gradients(x, params: VehicleParams):
    """Slip angles and their gradients over the 8 vehicle states."""
    x = np.asarray(x, dtype=float)
    vx = x[..., IVX]
    clamped = vx <= VX_FLOOR
    vxc = np.maximum(vx, VX_FLOOR)
    vy, om = x[..., IVY], x[..., IOMEGA]
    alpha_f, alpha_r = slip_angles(x, params)
    pf = vy + params.lf * om
    pr = -vy + params.lr * om
    df = vxc * vxc + pf * pf
    dr = vxc * vxc + pr * pr
    gf = np.zeros(x.shape[:-1] + (NX,))
    gr = np.zeros(x.shape[:-1] + (NX,))
    gf[..., IVX] = np.where(clamped, 0.0, pf / df)
    gf[..., IVY] = -vxc / df
    gf[..., IOMEGA] = -params.lf * vxc / df
    gf[..., IDELTA] = 1.0
    gr[..., IVX] = np.where(clamped, 0.0, -pr / dr)
    gr[..., IVY] = -vxc / dr
    gr[..., IOMEGA] = params.lr * vxc / dr
    return alpha_f, alpha_r, gf, gr


def ellipse_usage(x, params: VehicleParams, tires: TireParams, config: MpccConfig):
    """Per-axle ellipse usage ``|(p_long Fx, Fy)| / (p_ellipse D)`` and its state gradient."""
    alpha_f, alpha_r, gaf, gar = slip_gradients(x, params)
    F_fy, F_ry = lateral_tire_forces(alpha_f, alpha_r, tires)
    F_fx, F_rx = longitudinal_forces(x[..., IT], params)
    out = []
    for Fx, Fy, alpha, ga, (B, C, D), share in (
        (F_fx, F_fy, alpha_f, gaf, (tires.Bf, tires.Cf, tires.Df), params.kappa),
        (F_rx, F_ry, alpha_r, gar, (tires.Br, tires.Cr, tires.Dr), 1.0 - params.kappa),
    ):
        lim = config.p_ellipse * max(D, 1e-9)
        px = config.p_long * Fx
        nrm = np.sqrt(px * px + Fy * Fy + _ELLIPSE_EPS ** 2)
        val = nrm / lim
        dFy = magic_formula_slope(alpha, B, C, D)[..., None] * ga
        grad = (Fy[..., None] * dFy) / (nrm * lim)[..., None]
        grad[..., IT] += px * config.p_long * share / params.r_wheel / (nrm * lim)
        out.append((val, grad))
    return out


def stage_rows(xbar, params: VehicleParams, tires: TireParams, track: Track, config: MpccConfig):
    """Linearized soft rows ``G w <= h`` at warm states ``xbar`` (..., 9).

    Rows are normalized so that a slack of 1 means a 100% violation.
    """
    xbar = np.asarray(xbar, dtype=float)
    lead = xbar.shape[:-1]
    G = np.zeros(lead + (N_ROWS, NXA + NUA))
    h = np.zeros(lead + (N_ROWS,))
    xv = xbar[..., :NX]

    def affine(row, val, grad_x, bound):
        # grad . (x - xbar) + val <= bound, divided by bound
        G[..., row, :NX] = grad_x / bound
        h[..., row] = (bound - val + np.einsum("...i,...i->...", grad_x, xv)) / bound

    (ef, gef), (er, ger) = ellipse_usage(xv, params, tires, config)
    affine(0, ef, gef, 1.0)
    affine(1, er, ger, 1.0)
    af, ar, gaf, gar = slip_gradients(xv, params)
    am, dm = config.alpha_max, config.dalpha_max
    affine(2, af, gaf, am)
    affine(3, -af, -gaf, am)
    affine(4, ar, gar, am)
    affine(5, -ar, -gar, am)
    affine(6, af - ar, gaf - gar, dm)
    affine(7, ar - af, gar - gaf, dm)
    lin = linearize_errors(xbar[..., 0], xbar[..., 1], track, xbar[..., ITHETA])
    width = max(track.R - config.track_margin, 0.1)
    idx = [0, 1, ITHETA]
    p0 = xbar[..., idx]
    for row, sign in ((8, 1.0), (9, -1.0)):
        gc = sign * lin.grad_c
        G[..., row, idx] = gc / width
        h[..., row] = (width - sign * lin.e_c + np.einsum("...i,...i->...", gc, p0)) / width
    G[..., 10, IVX] = 1.0 / config.v_max
    h[..., 10] = 1.0
    return G, h


def initial_warm_start(state, track: Track, config: MpccConfig, params: VehicleParams,
                       theta: float | None = None) -> WarmStart:
    """Constant-speed rollout along the centerline from the projected progress."""
    state = np.asarray(state, dtype=float)
    if theta is None:
        theta = project(track, state[0], state[1])
    v = max(float(state[IVX]), 1.0)
    N, dt = config.N, config.dt
    th = theta + v * dt * np.arange(N + 1)
    Xc, Yc, Phic = query(track, th)
    Phic = np.unwrap(Phic)  # the heading jumps by a full turn at the finish line
    x = np.zeros((N + 1, NXA))
    x[:, 0], x[:, 1] = Xc, Yc
    # keep the heading continuous with the vehicle's own angle
    x[:, 2] = Phic - Phic[0] + state[2] + math.remainder(Phic[0] - state[2], 2 * math.pi)
    x[:, IVX] = v
    kappa = np.gradient(Phic, th)
    x[:, IOMEGA] = v * kappa
    x[:, IT] = np.clip(steady_torque(v, params), config.T_min, config.T_max)
    x[:, IDELTA] = np.clip(np.arctan((params.lf + params.lr) * kappa), -config.delta_max, config.delta_max)
    x[:, ITHETA] = th
    x[0, :NX] = state
    u = np.zeros((N, NUA))
    u[:, IVS] = v
    return WarmStart(x, u, np.zeros(2))


def _deviation_problem(xbar, ubar, A, B, c, x0, H, g, lb, ub, G, h):
    """Re-pose the QP in scaled deviations from the warm trajectory."""
    N = len(ubar)
    wbar = np.zeros((N + 1, NXA + NUA))
    wbar[:, :NXA] = xbar
    wbar[:N, NXA:] = ubar
    c = c + np.einsum("kij,kj->ki", A, xbar[:-1]) + np.einsum("kij,kj->ki", B, ubar) - xbar[1:]
    g = g + np.einsum("kij,kj->ki", H, wbar)
    h = h - np.einsum("kmi,ki->km", G, wbar)
    lb, ub = lb - wbar, ub - wbar
    x0 = x0 - xbar[0]
    sx, su = _X_SCALE, _U_SCALE
    sw = np.concatenate([sx, su])
    A = A * sx[None, None, :] / sx[None, :, None]
    B = B * su[None, None, :] / sx[None, :, None]
    c = c / sx
    x0 = x0 / sx
    H = H * sw[None, :, None] * sw[None, None, :]
    g = g * sw
    lb, ub = lb / sw, ub / sw
    G = G * sw[None, None, :]
    return A, B, c, x0, H, g, lb, ub, G, h


def build_problem(measurement, warm: WarmStart, track: Track, model: GpModel | None, config: MpccConfig,
                  params: VehicleParams, tires: TireParams, gp: GpHorizon | None = None):
    """Transcribe one step into a QP; returns ``(problem, gp_horizon)``.

    ``measurement`` is the augmented 9-state.  The QP variables are scaled
    deviations from the warm trajectory (with ``measurement`` as its first
    stage); use :func:`unscale_solution` on its result.
    """
    meas = np.asarray(measurement, dtype=float)
    if not meas[IVX] > VX_FLOOR:
        raise ValueError(f"measured vx {meas[IVX]:.3g} is below the slip-angle floor")
    N, dt = config.N, config.dt
    xbar = warm.x.copy()
    ubar = warm.u
    xbar[0] = meas
    if gp is None:
        gp = gp_disturbance_horizon(model, WarmStart(xbar, ubar), params)

    A8, B8, c8 = linearize_discretize(xbar[:N, :NX], ubar[:, :2], params, tires, dt)
    A = np.zeros((N, NXA, NXA))
    B = np.zeros((N, NXA, NUA))
    c = np.zeros((N, NXA))
    A[:, :NX, :NX] = A8
    A[:, ITHETA, ITHETA] = 1.0
    B[:, :NX, :2] = B8
    B[:, ITHETA, IVS] = dt
    c[:, :NX] = c8 + RESIDUAL_MAP.inject(gp.mean)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
        raise ValueError("non-finite linearization")

    nv = NXA + NUA
    H = np.zeros((N + 1, nv, nv))
    g = np.zeros((N + 1, nv))
    idx = np.array([0, 1, ITHETA])
    lin = linearize_errors(xbar[:, 0], xbar[:, 1], track, xbar[:, ITHETA])
    p0 = xbar[:, idx]
    for q, e0, gr in ((config.q_l, lin.e_l, lin.grad_l), (config.q_c, lin.e_c, lin.grad_c)):
        r0 = e0 - np.einsum("ki,ki->k", gr, p0)
        H[:, idx[:, None], idx[None, :]] += 2.0 * q * gr[:, :, None] * gr[:, None, :]
        g[:, idx] += 2.0 * q * r0[:, None] * gr
    H[0] = 0.0  # x0 is fixed; keep stage-0 terms off the state block
    g[0, :NXA] = 0.0
    H[:, np.arange(NXA), np.arange(NXA)] += np.asarray(config.Rx)
    H[:N, NXA + np.arange(NUA), NXA + np.arange(NUA)] += np.asarray(config.Ru)
    g[:N, NXA + IVS] -= config.q_v

    lb = np.full((N + 1, nv), -np.inf)
    ub = np.full((N + 1, nv), np.inf)
    lb[1:, IT], ub[1:, IT] = config.T_min, config.T_max
    lb[1:, IDELTA], ub[1:, IDELTA] = -config.delta_max, config.delta_max
    lb[:N, NXA + IDT], ub[:N, NXA + IDT] = -config.dT_max, config.dT_max
    lb[:N, NXA + IDD], ub[:N, NXA + IDD] = -config.ddelta_max, config.ddelta_max
    lb[:N, NXA + IVS], ub[:N, NXA + IVS] = 0.0, config.vs_max

    G, h = stage_rows(xbar, params, tires, track, config)
    h[0] = np.inf  # rows on the fixed initial state carry no information
    soft = np.ones((N + 1, N_ROWS), bool)
    Zq = np.full((N + 1, N_ROWS), config.slack_quad)
    zl = np.full((N + 1, N_ROWS), config.slack_lin)

    A, B, c, x0, H, g, lb, ub, G, h = _deviation_problem(xbar, ubar, A, B, c, meas, H, g, lb, ub, G, h)
    pb = qpcore.QpProblem(A=A, B=B, c=c, x0=x0, H=H, g=g, lb=lb, ub=ub, G=G, h=h, soft=soft, Zq=Zq, zl=zl)
    return pb, gp


def unscale_solution(sol: qpcore.QpSolution, warm: WarmStart, measurement):
    """Physical ``(x, u)`` trajectories from a solution of :func:`build_problem`."""
    xbar = warm.x.copy()
    xbar[0] = measurement
    return xbar + sol.x * _X_SCALE, warm.u + sol.u * _U_SCALE


def shift_warm_start(x, u, command) -> WarmStart:
    """Drop the first stage; the terminal stage is duplicated with progress continued."""
    xn = np.vstack([x[1:], x[-1:]])
    un = np.vstack([u[1:], u[-1:]])
    xn[-1, ITHETA] = x[-1, ITHETA] + (x[-1, ITHETA] - x[-2, ITHETA])
    return WarmStart(xn, un, np.asarray(command, dtype=float).copy())


def step(measurement, track: Track, model: GpModel | None, config: MpccConfig, state: WarmStart,
         params: VehicleParams, tires: TireParams):
    """One control period: returns ``(command (dT, ddelta), new warm start, diagnostics)``.

    ``measurement`` is the 8-state vehicle measurement; progress is carried
    by the warm start and re-projected when the lag error drifts.
    """
    t0 = time.perf_counter()
    meas = np.asarray(measurement, dtype=float)
    theta = float(state.x[0, ITHETA])
    e_l = float(linearize_errors(meas[0], meas[1], track, theta).e_l)
    reprojected = abs(e_l) > config.reproject_lag
    warm = state
    if reprojected:
        theta_new = project(track, meas[0], meas[1], theta_hint=track.wrap(theta))
        # keep the horizon's progress continuous with the old parameterization
        shift = theta_new - track.wrap(theta)
        if track.closed and abs(shift) > 0.5 * track.theta_max:
            shift -= math.copysign(track.theta_max, shift)
        warm = state.copy()
        warm.x[:, ITHETA] += shift
        theta = float(warm.x[0, ITHETA])
    x0 = np.concatenate([meas, [theta]])
    pb, gp = build_problem(x0, warm, track, model, config, params, tires)
    sol = qpcore.solve(pb, max_iter=config.qp_max_iter, tol=config.qp_tol)
    x, u = unscale_solution(sol, warm, x0)
    held = not sol.solved
    if held:
        # keep to the previous plan for this instant
        command = np.array(warm.u[0, :2])
        x, u = warm.x.copy(), warm.u.copy()
        x[0] = x0
    else:
        command = u[0, :2].copy()
    new_warm = shift_warm_start(x, u, command)
    # keep theta in [0, L) at the new first stage
    if track.closed:
        lap = math.floor(new_warm.x[0, ITHETA] / track.theta_max)
        new_warm.x[:, ITHETA] -= lap * track.theta_max
    slacks = sol.s.copy()
    Gw = np.einsum("kmi,ki->km", pb.G, qpcore._stage_vectors(pb, sol.x, sol.u))
    margins = np.where(np.isfinite(pb.h), pb.h - Gw, np.inf)
    diag = ControllerDiagnostics(
        status=sol.status, iterations=sol.iterations, residuals=sol.residuals,
        slack_max=float(np.max(slacks, initial=0.0)), slacks=slacks,
        gp_mean=gp.mean, gp_var=gp.variance, margins=margins, predicted=x,
        held=held, reprojected=reprojected, comp_time=time.perf_counter() - t0,
    )
    return command, new_warm, diag


def config_from_dict(values: dict) -> MpccConfig:
    names = {f.name for f in fields(MpccConfig)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown controller keys: {sorted(unknown)}")
    return replace(MpccConfig(), **values)
