"""Gaussian-process residual over the features ``z = [alpha_f, alpha_r, T]``.

Three independent outputs (per-step deviations of vx, vy, omega) share one
squared-exponential kernel with a diagonal metric.  The training set is a
budgeted dictionary; candidates are admitted by how poorly the current
members span them in kernel space.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .vehicle import (NX, VELOCITY_ROWS, TireParams, VehicleParams, lateral_tire_forces,
                      longitudinal_forces)

N_FEATURES = 3
N_OUTPUTS = 3
JITTER_START = 1e-10
JITTER_MAX = 1e-6
OUTPUT_NAMES = ("vx", "vy", "omega")
DEFAULT_GAMMA = 1e-2  # independence threshold, relative to sigma_f2


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel and noise settings.

    Output ``a`` uses the prior variance ``sigma_f2 * output_scale[a]**2``;
    the dictionary score always uses the unscaled kernel.
    """

    lengthscales: tuple = (0.03, 0.03, 1000.0)  # rad, rad, N m
    sigma_f2: float = 1.0
    sigma_n2: tuple = (1e-4, 1e-4, 1e-4)
    output_scale: tuple = (0.05, 0.05, 0.02)  # m/s, m/s, rad/s per step
    jitter: float = 1e-8  # relative, for the independence score only

    def __post_init__(self):
        for name in ("lengthscales", "sigma_n2", "output_scale"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3:
                raise ValueError(f"{name} needs 3 values, got {len(v)}")
            if not all(x > 0 and math.isfinite(x) for x in v):
                raise ValueError(f"{name} must be strictly positive, got {v}")
            object.__setattr__(self, name, v)
        if not (self.sigma_f2 > 0 and math.isfinite(self.sigma_f2)):
            raise ValueError(f"sigma_f2 must be strictly positive, got {self.sigma_f2}")
        if not self.jitter >= 0:
            raise ValueError("jitter must be nonnegative")

    @property
    def output_variance(self) -> np.ndarray:
        return self.sigma_f2 * np.asarray(self.output_scale) ** 2


def se_kernel(zi, zj, hyp: GpHyperparams, sigma_f2: float | None = None):
    """``sigma_f2 * exp(-0.5 (zi - zj)^T M (zi - zj))`` with ``M = diag(1 / l**2)``.

    Broadcasts over leading axes of ``zi`` and ``zj``.
    """
    s2 = hyp.sigma_f2 if sigma_f2 is None else sigma_f2
    d = (np.asarray(zi, dtype=float) - np.asarray(zj, dtype=float)) / np.asarray(hyp.lengthscales)
    return s2 * np.exp(-0.5 * np.sum(d * d, axis=-1))


def kernel_matrix(Za, Zb, hyp: GpHyperparams, sigma_f2: float | None = None) -> np.ndarray:
    Za = np.asarray(Za, dtype=float).reshape(-1, N_FEATURES)
    Zb = np.asarray(Zb, dtype=float).reshape(-1, N_FEATURES)
    return se_kernel(Za[:, None, :], Zb[None, :, :], hyp, sigma_f2)


# ---------------------------------------------------------------------------
# residual targets


@dataclass(frozen=True)
class ResidualMap:
    """Injection of the 3 residual outputs into the velocity rows of the state."""

    Bd: np.ndarray = field(default_factory=lambda: np.eye(NX)[:, list(VELOCITY_ROWS)])

    @property
    def pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.Bd)

    def inject(self, g) -> np.ndarray:
        return np.asarray(g, dtype=float) @ self.Bd.T

    def extract(self, dx) -> np.ndarray:
        return np.asarray(dx, dtype=float) @ self.pinv.T


RESIDUAL_MAP = ResidualMap()


def residual_target(x_k, u_k, x_next, nominal: Callable) -> np.ndarray:
    """Velocity-row part of ``x_next - nominal(x_k, u_k)``."""
    dx = np.asarray(x_next, dtype=float) - np.asarray(nominal(x_k, u_k), dtype=float)
    return RESIDUAL_MAP.extract(dx)


# ---------------------------------------------------------------------------
# feature-space validity


@dataclass(frozen=True)
class ValidityLimits:
    p_long: float = 1.0
    p_ellipse: float = 0.9
    alpha_max: float = 0.12  # rad
    dalpha_max: float = 0.06  # rad

    def __post_init__(self):
        for name in ("p_long", "p_ellipse", "alpha_max", "dalpha_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class ValidityReport(NamedTuple):
    valid: bool
    violated: tuple
    margins: dict


CONSTRAINT_NAMES = ("ellipse_front", "ellipse_rear", "slip_front", "slip_rear", "slip_difference")


def constraint_margins(F_fx, F_fy, F_rx, F_ry, alpha_f, alpha_r, tires: TireParams,
                       limits: ValidityLimits) -> dict:
    """Signed margins, nonnegative inside the valid region.

    Ellipse margins are in force units (``p_ellipse*D - sqrt(...)``), slip
    margins in radians.
    """
    ef = limits.p_ellipse * tires.Df - np.hypot(limits.p_long * np.asarray(F_fx), F_fy)
    er = limits.p_ellipse * tires.Dr - np.hypot(limits.p_long * np.asarray(F_rx), F_ry)
    return {
        "ellipse_front": ef,
        "ellipse_rear": er,
        "slip_front": limits.alpha_max - np.abs(alpha_f),
        "slip_rear": limits.alpha_max - np.abs(alpha_r),
        "slip_difference": limits.dalpha_max - np.abs(np.asarray(alpha_f) - alpha_r),
    }


def is_valid_sample(F_fx, F_fy, F_rx, F_ry, alpha_f, alpha_r, tires: TireParams,
                    limits: ValidityLimits) -> ValidityReport:
    # the squared forms are compared directly so points on the ellipse are kept
    lp, pe = limits.p_long, limits.p_ellipse
    ok = {
        "ellipse_front": (lp * F_fx) ** 2 + F_fy ** 2 <= (pe * tires.Df) ** 2,
        "ellipse_rear": (lp * F_rx) ** 2 + F_ry ** 2 <= (pe * tires.Dr) ** 2,
        "slip_front": abs(alpha_f) <= limits.alpha_max,
        "slip_rear": abs(alpha_r) <= limits.alpha_max,
        "slip_difference": abs(alpha_f - alpha_r) <= limits.dalpha_max,
    }
    violated = tuple(k for k in CONSTRAINT_NAMES if not ok[k])
    margins = {k: float(v) for k, v in constraint_margins(F_fx, F_fy, F_rx, F_ry, alpha_f, alpha_r,
                                                          tires, limits).items()}
    return ValidityReport(not violated, violated, margins)


def feature_forces(z, params: VehicleParams, tires: TireParams):
    """Nominal ``(F_fx, F_fy, F_rx, F_ry)`` implied by a feature vector."""
    z = np.asarray(z, dtype=float)
    F_fy, F_ry = lateral_tire_forces(z[..., 0], z[..., 1], tires)
    F_fx, F_rx = longitudinal_forces(z[..., 2], params)
    return F_fx, F_fy, F_rx, F_ry


def feature_validity(z, params: VehicleParams, tires: TireParams, limits: ValidityLimits) -> ValidityReport:
    F_fx, F_fy, F_rx, F_ry = (float(f) for f in feature_forces(z, params, tires))
    return is_valid_sample(F_fx, F_fy, F_rx, F_ry, float(z[0]), float(z[1]), tires, limits)


def _feature_inside(z, params, tires, limits):
    # vectorized twin of is_valid_sample on feature points
    F_fx, F_fy, F_rx, F_ry = feature_forces(z, params, tires)
    af, ar = z[..., 0], z[..., 1]
    lp, pe = limits.p_long, limits.p_ellipse
    return (((lp * F_fx) ** 2 + F_fy ** 2 <= (pe * tires.Df) ** 2)
            & ((lp * F_rx) ** 2 + F_ry ** 2 <= (pe * tires.Dr) ** 2)
            & (np.abs(af) <= limits.alpha_max) & (np.abs(ar) <= limits.alpha_max)
            & (np.abs(af - ar) <= limits.dalpha_max))


def valid_region_boundary(params: VehicleParams, tires: TireParams, limits: ValidityLimits,
                          n: int = 400, seed: int = 0, torque_scale: float | None = None) -> np.ndarray:
    """Points on the boundary of the valid feature region, shape ``(n, 3)``.

    Rays from the zero-torque, zero-slip point are bisected to the boundary.
    ``torque_scale`` sets the torque extent of the ray directions.
    """
    rng = np.random.default_rng(seed)
    if torque_scale is None:
        torque_scale = limits.p_ellipse * max(tires.Df, tires.Dr) * params.r_wheel / limits.p_long
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d *= np.array([limits.alpha_max, limits.alpha_max, torque_scale])
    lo = np.zeros(n)
    hi = np.ones(n)
    # grow until every ray leaves the region
    for _ in range(60):
        out = ~_feature_inside(hi[:, None] * d, params, tires, limits)
        if out.all():
            break
        hi = np.where(out, hi, 2 * hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        inside = _feature_inside(mid[:, None] * d, params, tires, limits)
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return lo[:, None] * d


# ---------------------------------------------------------------------------
# dictionary


@dataclass(frozen=True, eq=False)
class GpDataset:
    Z: np.ndarray = field(default_factory=lambda: np.zeros((0, N_FEATURES)))
    Y: np.ndarray = field(default_factory=lambda: np.zeros((0, N_OUTPUTS)))
    budget: int = 100

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float).reshape(-1, N_FEATURES)
        Y = np.asarray(self.Y, dtype=float).reshape(-1, N_OUTPUTS)
        if len(Z) != len(Y):
            raise ValueError(f"Z has {len(Z)} rows but Y has {len(Y)}")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if len(Z) > self.budget:
            raise ValueError(f"{len(Z)} points exceed the budget of {self.budget}")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Y", Y)

    def __len__(self):
        return len(self.Z)

    def same_as(self, other: "GpDataset") -> bool:
        return (self.budget == other.budget and np.array_equal(self.Z, other.Z)
                and np.array_equal(self.Y, other.Y))


class InsertReport(NamedTuple):
    accepted: bool
    gamma: float
    evicted: int | None  # index in the old dataset
    reason: str


def _jittered_gram(Z, hyp):
    return kernel_matrix(Z, Z, hyp) + hyp.jitter * hyp.sigma_f2 * np.eye(len(Z))


def independence_score(z, dataset: GpDataset, hyp: GpHyperparams) -> float:
    """Squared residual of projecting ``phi(z)`` onto the span of the dictionary."""
    z = np.asarray(z, dtype=float)
    kzz = hyp.sigma_f2
    if len(dataset) == 0:
        return float(kzz)
    K = _jittered_gram(dataset.Z, hyp)
    ks = kernel_matrix(dataset.Z, z, hyp)[:, 0]
    L = np.linalg.cholesky(K)
    v = solve_triangular(L, ks, lower=True)
    return float(max(kzz - v @ v, 0.0))


def leave_one_out_scores(Z, hyp: GpHyperparams) -> np.ndarray:
    """Score of each point against all the others."""
    K = _jittered_gram(Z, hyp)
    Kinv_diag = np.diag(np.linalg.inv(K))
    eps = hyp.jitter * hyp.sigma_f2
    # gamma_i = 1 / [K^-1]_ii computed with the jittered Gram; remove the jitter itself
    return np.maximum(1.0 / Kinv_diag - eps, 0.0)


def maybe_insert(dataset: GpDataset, z, y, hyp: GpHyperparams, gamma_threshold: float | None = None,
                 valid: bool = True) -> tuple[GpDataset, InsertReport]:
    """Offer ``(z, y)`` to the dictionary.

    A full dictionary drops the member that the others (plus the newcomer)
    explain best before inserting.
    """
    if gamma_threshold is None:
        gamma_threshold = DEFAULT_GAMMA * hyp.sigma_f2
    z = np.asarray(z, dtype=float).reshape(N_FEATURES)
    y = np.asarray(y, dtype=float).reshape(N_OUTPUTS)
    if not valid:
        return dataset, InsertReport(False, float("nan"), None, "invalid")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
        return dataset, InsertReport(False, float("nan"), None, "non-finite")
    gamma = independence_score(z, dataset, hyp)
    if not gamma > gamma_threshold:
        return dataset, InsertReport(False, gamma, None, "dependent")
    Z, Y = dataset.Z, dataset.Y
    evicted = None
    if len(dataset) >= dataset.budget:
        loo = leave_one_out_scores(np.vstack([Z, z]), hyp)[:-1]
        evicted = int(np.argmin(loo))
        Z = np.delete(Z, evicted, axis=0)
        Y = np.delete(Y, evicted, axis=0)
    new = GpDataset(np.vstack([Z, z]), np.vstack([Y, y]), dataset.budget)
    return new, InsertReport(True, gamma, evicted, "inserted")


def save_dataset(dataset: GpDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha_f", "alpha_r", "T", "y_vx", "y_vy", "y_omega"])
        for z, y in zip(dataset.Z, dataset.Y):
            w.writerow([repr(float(v)) for v in (*z, *y)])


def load_dataset(path, budget: int = 100) -> GpDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) != 6:
        raise ValueError(f"{path}: expected a 6-column dataset CSV")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, 6)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed dataset row ({exc})") from None
    return GpDataset(data[:, :3], data[:, 3:], budget=max(budget, len(data)))


# ---------------------------------------------------------------------------
# posterior


class GpPrediction(NamedTuple):
    mean: np.ndarray  # (..., 3)
    variance: np.ndarray  # (..., 3)


@dataclass(frozen=True, eq=False)
class GpModel:
    dataset: GpDataset
    hyp: GpHyperparams
    chol: np.ndarray  # (3, m, m) lower factors of K_a + sigma_a^2 I
    weights: np.ndarray  # (m, 3)
    jitter: np.ndarray  # (3,) extra diagonal actually used


def fit(dataset: GpDataset, hyp: GpHyperparams) -> GpModel:
    if len(dataset) == 0:
        raise GpFitError("cannot fit a GP to an empty dataset")
    m = len(dataset)
    K = kernel_matrix(dataset.Z, dataset.Z, hyp)
    chol = np.empty((N_OUTPUTS, m, m))
    weights = np.empty((m, N_OUTPUTS))
    used = np.zeros(N_OUTPUTS)
    s2 = np.asarray(hyp.output_scale) ** 2
    for a in range(N_OUTPUTS):
        Ka = s2[a] * K + hyp.sigma_n2[a] * np.eye(m)
        scale = hyp.sigma_f2 * s2[a]
        jit = 0.0
        while True:
            try:
                L = np.linalg.cholesky(Ka + jit * scale * np.eye(m))
                break
            except np.linalg.LinAlgError:
                jit = JITTER_START if jit == 0.0 else 10 * jit
                if jit > JITTER_MAX:
                    raise GpFitError(f"output {OUTPUT_NAMES[a]}: Gram matrix not positive definite "
                                     f"even with relative jitter {JITTER_MAX:g}") from None
        chol[a] = L
        used[a] = jit * scale
        weights[:, a] = cho_solve((L, True), dataset.Y[:, a])
    return GpModel(dataset, hyp, chol, weights, used)


def predict(model: GpModel, z) -> GpPrediction:
    """Posterior mean and variance per output; ``z`` may be batched ``(..., 3)``."""
    z = np.asarray(z, dtype=float)
    lead = z.shape[:-1]
    Zq = z.reshape(-1, N_FEATURES)
    hyp = model.hyp
    s2 = np.asarray(hyp.output_scale) ** 2
    Ks = kernel_matrix(model.dataset.Z, Zq, hyp)  # (m, n), unscaled
    mean = np.empty((len(Zq), N_OUTPUTS))
    var = np.empty((len(Zq), N_OUTPUTS))
    for a in range(N_OUTPUTS):
        ks = s2[a] * Ks
        mean[:, a] = ks.T @ model.weights[:, a]
        v = solve_triangular(model.chol[a], ks, lower=True)
        var[:, a] = np.maximum(hyp.sigma_f2 * s2[a] - np.sum(v * v, axis=0), 0.0)
    return GpPrediction(mean.reshape(*lead, N_OUTPUTS), var.reshape(*lead, N_OUTPUTS))
