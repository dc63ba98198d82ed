"""Stage-structured convex QP solver (Mehrotra interior point + Riccati recursion).

Problem, for stages ``k = 0..N`` with stage vector ``w_k = [x_k; u_k]``::

    min   sum_k  1/2 w_k' H_k w_k + g_k' w_k  +  sum_rows 1/2 Zq s^2 + zl s
    s.t.  x_0 = x0   (fixed)
          x_{k+1} = A_k x_k + B_k u_k + c_k            k < N
          lb_k <= w_k <= ub_k                          hard boxes
          G_k w_k <= h_k          (+ s, s >= 0 on soft rows)

The terminal stage has no input: ``u_N`` is ignored and must not be
constrained. Rows with a non-finite bound are inactive. Each Newton system is
an equality-constrained LQ problem solved by a Riccati sweep, so the cost of
one iteration is linear in ``N``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

STATUS_SOLVED = "solved"
STATUS_MAX_ITER = "max-iter"
STATUS_INFEASIBLE = "infeasible-detected"
STATUS_NUMERICAL = "numerical-failure"

_TAU = 0.995
_INFEASIBLE_DUAL = 1e12
_POLISH = 1e-2
_POLISH_ITERS = 3


class QpDimensionError(ValueError):
    pass


class QpNotConvexError(ValueError):
    pass


@dataclass
class QpProblem:
    A: np.ndarray  # (N, nx, nx)
    B: np.ndarray  # (N, nx, nu)
    c: np.ndarray  # (N, nx)
    x0: np.ndarray  # (nx,)
    H: np.ndarray  # (N+1, nv, nv)
    g: np.ndarray  # (N+1, nv)
    lb: np.ndarray | None = None  # (N+1, nv)
    ub: np.ndarray | None = None
    G: np.ndarray | None = None  # (N+1, m, nv)
    h: np.ndarray | None = None  # (N+1, m)
    soft: np.ndarray | None = None  # (N+1, m) bool
    Zq: np.ndarray | None = None  # (N+1, m) quadratic slack weight
    zl: np.ndarray | None = None  # (N+1, m) linear slack weight

    def __post_init__(self):
        N, nx, nu = self.B.shape
        nv = nx + nu
        self.A = np.ascontiguousarray(self.A, dtype=float)
        self.B = np.ascontiguousarray(self.B, dtype=float)
        if self.A.shape != (N, nx, nx) or np.shape(self.c) != (N, nx) or np.shape(self.x0) != (nx,):
            raise QpDimensionError("dynamics dimensions are inconsistent")
        if np.shape(self.H) != (N + 1, nv, nv) or np.shape(self.g) != (N + 1, nv):
            raise QpDimensionError(f"cost must have shapes {(N + 1, nv, nv)} and {(N + 1, nv)}")
        self.c = np.asarray(self.c, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.lb = np.full((N + 1, nv), -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full((N + 1, nv), np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.lb.shape != (N + 1, nv) or self.ub.shape != (N + 1, nv):
            raise QpDimensionError("box bounds must have shape (N+1, nv)")
        if self.G is None:
            self.G = np.zeros((N + 1, 0, nv))
            self.h = np.zeros((N + 1, 0))
        self.G = np.asarray(self.G, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        m = self.G.shape[1]
        if self.G.shape != (N + 1, m, nv) or self.h.shape != (N + 1, m):
            raise QpDimensionError("general inequalities must have shapes (N+1, m, nv) and (N+1, m)")
        self.soft = np.zeros((N + 1, m), bool) if self.soft is None else np.asarray(self.soft, bool)
        self.Zq = np.zeros((N + 1, m)) if self.Zq is None else np.asarray(self.Zq, dtype=float)
        self.zl = np.zeros((N + 1, m)) if self.zl is None else np.asarray(self.zl, dtype=float)
        for name in ("soft", "Zq", "zl"):
            if getattr(self, name).shape != (N + 1, m):
                raise QpDimensionError(f"{name} must have shape (N+1, m)")
        if np.any(self.Zq[self.soft] < 0) or np.any(self.zl[self.soft] < 0):
            raise QpNotConvexError("slack weights must be nonnegative")
        if np.any(self.soft & (self.Zq <= 0) & (self.zl <= 0) & np.isfinite(self.h)):
            raise QpNotConvexError("a soft row needs a positive quadratic or linear slack weight")
        last_u = np.concatenate([self.G[N, :, nx:].ravel(), np.isfinite(self.lb[N, nx:]), np.isfinite(self.ub[N, nx:])])
        if np.any(last_u != 0):
            raise QpDimensionError("terminal stage inputs must not be constrained")

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def nx(self) -> int:
        return self.B.shape[1]

    @property
    def nu(self) -> int:
        return self.B.shape[2]

    @property
    def m(self) -> int:
        return self.G.shape[1]


class KktResiduals(NamedTuple):
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self)


@dataclass
class QpSolution:
    x: np.ndarray  # (N+1, nx)
    u: np.ndarray  # (N, nu)
    s: np.ndarray  # (N+1, m) slacks, zero on hard rows
    lam: np.ndarray  # (N+1, m) multipliers of G w - s <= h
    lam_s: np.ndarray  # (N+1, m) multipliers of s >= 0
    lam_lb: np.ndarray  # (N+1, nv)
    lam_ub: np.ndarray  # (N+1, nv)
    pi: np.ndarray  # (N, nx) dynamics multipliers
    status: str = STATUS_SOLVED
    iterations: int = 0
    residuals: KktResiduals = field(default_factory=lambda: KktResiduals(np.inf, np.inf, np.inf, np.inf))
    objective: float = np.nan

    @property
    def solved(self) -> bool:
        return self.status == STATUS_SOLVED


# ---------------------------------------------------------------------------
# problem-level evaluation (independent of solver internals)


def _stage_vectors(problem: QpProblem, x, u):
    w = np.zeros((problem.N + 1, problem.nx + problem.nu))
    w[:, : problem.nx] = x
    w[: problem.N, problem.nx:] = u
    return w


def objective(problem: QpProblem, x, u, s=None) -> float:
    w = _stage_vectors(problem, x, u)
    w[problem.N, problem.nx:] = 0.0
    val = 0.5 * np.einsum("ki,kij,kj->", w, problem.H, w) + np.einsum("ki,ki->", problem.g, w)
    if s is not None and problem.m:
        act = problem.soft & np.isfinite(problem.h)
        val += np.sum(np.where(act, 0.5 * problem.Zq * s * s + problem.zl * s, 0.0))
    return float(val)


def kkt_residuals(problem: QpProblem, candidate: QpSolution) -> KktResiduals:
    """Infinity-norm KKT residuals of a candidate primal-dual point."""
    N, nx = problem.N, problem.nx
    x, u, pi = candidate.x, candidate.u, candidate.pi
    w = _stage_vectors(problem, x, u)
    act = np.isfinite(problem.h)
    soft = problem.soft & act
    h = np.where(act, problem.h, 0.0)
    lam = np.where(act, candidate.lam, 0.0)
    lam_s = np.where(soft, candidate.lam_s, 0.0)
    s = np.where(soft, candidate.s, 0.0)
    has_lb, has_ub = np.isfinite(problem.lb), np.isfinite(problem.ub)
    lam_lb = np.where(has_lb, candidate.lam_lb, 0.0)
    lam_ub = np.where(has_ub, candidate.lam_ub, 0.0)

    # gradient of the Lagrangian in every stage vector
    grad = np.einsum("kij,kj->ki", problem.H, w) + problem.g
    grad += np.einsum("kmi,km->ki", problem.G, lam)
    grad += lam_ub - lam_lb
    grad[:N, :nx] += np.einsum("kji,kj->ki", problem.A, pi)
    grad[:N, nx:] += np.einsum("kji,kj->ki", problem.B, pi)
    grad[1:, :nx] -= pi
    free = np.ones_like(grad, dtype=bool)
    free[0, :nx] = False  # x0 is fixed
    free[N, nx:] = False  # no terminal input
    stat = np.max(np.abs(grad[free]), initial=0.0)
    if problem.m:
        stat_s = np.where(soft, problem.Zq * s + problem.zl - lam - lam_s, 0.0)
        stat = max(stat, np.max(np.abs(stat_s), initial=0.0))

    dyn = x[1:] - np.einsum("kij,kj->ki", problem.A, x[:-1]) - np.einsum("kij,kj->ki", problem.B, u) - problem.c
    Gw = np.einsum("kmi,ki->km", problem.G, w)
    row_gap = h - Gw + s  # >= 0 required on active rows
    box_lo = np.where(has_lb, w - problem.lb, 0.0)
    box_hi = np.where(has_ub, problem.ub - w, 0.0)
    box_lo[0, :nx] = 0.0
    box_hi[0, :nx] = 0.0
    primal = max(
        np.max(np.abs(dyn), initial=0.0),
        np.max(np.abs(x[0] - problem.x0), initial=0.0),
        np.max(np.where(act, -row_gap, 0.0), initial=0.0),
        np.max(-s, initial=0.0),
        np.max(-box_lo, initial=0.0),
        np.max(-box_hi, initial=0.0),
    )
    dual = max(
        np.max(-lam, initial=0.0), np.max(-lam_s, initial=0.0),
        np.max(-lam_lb, initial=0.0), np.max(-lam_ub, initial=0.0),
    )
    lam_lb0 = lam_lb.copy()
    lam_ub0 = lam_ub.copy()
    lam_lb0[0, :nx] = 0.0
    lam_ub0[0, :nx] = 0.0
    comp = max(
        np.max(np.abs(np.where(act, lam * row_gap, 0.0)), initial=0.0),
        np.max(np.abs(lam_s * s), initial=0.0),
        np.max(np.abs(lam_lb0 * box_lo), initial=0.0),
        np.max(np.abs(lam_ub0 * box_hi), initial=0.0),
    )
    return KktResiduals(float(stat), float(primal), float(dual), float(comp))


# ---------------------------------------------------------------------------
# Riccati kernels


@numba.njit(cache=True)
def _cholesky(M, floor):
    """Lower Cholesky factor; ok=False when a pivot drops below ``floor``."""
    n = M.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        d = M[j, j]
        for q in range(j):
            d -= L[j, q] * L[j, q]
        if not d > floor:
            return L, False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            v = M[i, j]
            for q in range(j):
                v -= L[i, q] * L[j, q]
            L[i, j] = v / L[j, j]
    return L, True


@numba.njit(cache=True)
def _lower_solve(L, b):
    # L y = b for a matrix right-hand side
    n = L.shape[0]
    y = b.copy()
    for i in range(n):
        for q in range(i):
            y[i] -= L[i, q] * y[q]
        y[i] /= L[i, i]
    return y


@numba.njit(cache=True)
def _upper_solve(L, b):
    # L^T y = b
    n = L.shape[0]
    y = b.copy()
    for i in range(n - 1, -1, -1):
        for q in range(i + 1, n):
            y[i] -= L[q, i] * y[q]
        y[i] /= L[i, i]
    return y


@numba.njit(cache=True)
def _riccati_factor(Hh, A, B):
    N, nx, nu = B.shape
    P = np.empty((N + 1, nx, nx))
    K = np.empty((N, nu, nx))
    Lu = np.zeros((N, nu, nu))
    Qux = np.empty((N, nu, nx))
    P[N] = Hh[N, :nx, :nx]
    for k in range(N - 1, -1, -1):
        Pn = P[k + 1]
        PA = Pn @ A[k]
        PB = Pn @ B[k]
        Quu = Hh[k, nx:, nx:] + B[k].T @ PB
        Qux_k = Hh[k, nx:, :nx] + B[k].T @ PA
        Qxx = Hh[k, :nx, :nx] + A[k].T @ PA
        Quu = 0.5 * (Quu + Quu.T)
        scale = 0.0
        for j in range(nu):
            scale = max(scale, abs(Quu[j, j]))
        # large interior-point weights cost a few digits in B'PB; a tiny
        # diagonal shift keeps the factorization going, a big one means trouble
        shift = 0.0
        while True:
            L, good = _cholesky(Quu + shift * np.eye(nu), 1e-14 * scale)
            if good:
                break
            shift = 1e-12 * scale if shift == 0.0 else 10.0 * shift
            if not shift <= 1e-7 * scale:
                return P, K, Lu, Qux, False
        M = _lower_solve(L, Qux_k)
        K[k] = -_upper_solve(L, M)
        Pk = Qxx - M.T @ M
        P[k] = 0.5 * (Pk + Pk.T)
        Lu[k] = L
        Qux[k] = Qux_k
    return P, K, Lu, Qux, True


@numba.njit(cache=True)
def _riccati_solve(P, K, Lu, Qux, gh, A, B, c, x0):
    N, nx, nu = B.shape
    p = np.empty((N + 1, nx))
    kff = np.empty((N, nu))
    p[N] = gh[N, :nx]
    for k in range(N - 1, -1, -1):
        pc = P[k + 1] @ c[k] + p[k + 1]
        qu = gh[k, nx:] + B[k].T @ pc
        qx = gh[k, :nx] + A[k].T @ pc
        kf = -_upper_solve(Lu[k], _lower_solve(Lu[k], qu))
        kff[k] = kf
        p[k] = qx + Qux[k].T @ kf
    w = np.zeros((N + 1, nx + nu))
    pi = np.empty((N, nx))
    xk = x0.copy()
    for k in range(N):
        uk = K[k] @ xk + kff[k]
        w[k, :nx] = xk
        w[k, nx:] = uk
        xk = A[k] @ xk + B[k] @ uk + c[k]
        pi[k] = P[k + 1] @ xk + p[k + 1]
    w[N, :nx] = xk
    return w, pi


# ---------------------------------------------------------------------------
# interior point


class _Rows:
    """All inequality rows of a problem stacked per stage: general rows then boxes."""

    def __init__(self, pb: QpProblem):
        N, nx, nv, m = pb.N, pb.nx, pb.nx + pb.nu, pb.m
        eye = np.broadcast_to(np.eye(nv), (N + 1, nv, nv))
        self.G = np.concatenate([pb.G, eye, -eye], axis=1)
        h = np.concatenate([pb.h, pb.ub, -pb.lb], axis=1)
        act = np.isfinite(h)
        pad = np.zeros((N + 1, 2 * nv))
        soft = np.concatenate([pb.soft, pad.astype(bool)], axis=1)
        # hard stage-0 rows that only involve the fixed x0 cannot be influenced
        act[0] &= np.any(self.G[0, :, nx:] != 0, axis=1) | soft[0]
        self.act = act
        self.h = np.where(act, h, 0.0)
        self.soft = soft & act
        self.hard = act & ~self.soft
        self.Zq = np.concatenate([pb.Zq, pad], axis=1)
        self.zl = np.concatenate([pb.zl, pad], axis=1)
        self.m = m
        self.nv = nv
        self.n_comp = int(act.sum() + self.soft.sum())

    def split(self, lam1):
        m, nv = self.m, self.nv
        return lam1[:, :m], lam1[:, m + nv:], lam1[:, m:m + nv]  # general, lower, upper


def _check_convex(pb: QpProblem):
    nx = pb.nx
    scale = max(1.0, float(np.abs(pb.H).max(initial=0.0)))
    if not np.allclose(pb.H, np.swapaxes(pb.H, 1, 2), atol=1e-12 * scale):
        raise QpNotConvexError("stage Hessians must be symmetric")
    ev = np.linalg.eigvalsh(pb.H[:-1])[:, 0] if pb.N else np.zeros(0)
    ev = np.append(ev, np.linalg.eigvalsh(pb.H[-1, :nx, :nx])[0])
    if np.min(ev) < -1e-9 * scale:
        k = int(np.argmin(ev))
        raise QpNotConvexError(f"stage {k} Hessian is not positive semidefinite (min eig {ev[k]:.3g})")


def _to_solution(pb: QpProblem, rows: _Rows, w, pi, s, lam1, lam2) -> QpSolution:
    nx = pb.nx
    lam_g, lam_lb, lam_ub = rows.split(np.where(rows.act, lam1, 0.0))
    return QpSolution(
        x=w[:, :nx].copy(),
        u=w[:-1, nx:].copy(),
        s=np.where(rows.soft, s, 0.0)[:, : rows.m].copy(),
        lam=lam_g.copy(),
        lam_s=np.where(rows.soft, lam2, 0.0)[:, : rows.m].copy(),
        lam_lb=lam_lb.copy(),
        lam_ub=lam_ub.copy(),
        pi=pi.copy(),
    )


def solve(problem: QpProblem, warm_start: QpSolution | None = None,
          max_iter: int = 40, tol: float = 1e-6) -> QpSolution:
    """Solve a stage-structured QP; see the module docstring for the form."""
    pb = problem
    _check_convex(pb)
    rows = _Rows(pb)
    N, nx, nv = pb.N, pb.nx, pb.nx + pb.nu
    G, h, act, soft = rows.G, rows.h, rows.act, rows.soft
    Zq, zl = rows.Zq, rows.zl

    def finish(sol, status, it):
        sol.status = status
        sol.iterations = it
        sol.residuals = kkt_residuals(pb, sol)
        sol.objective = objective(pb, sol.x, sol.u, sol.s)
        return sol

    if warm_start is not None:
        w = _stage_vectors(pb, warm_start.x, warm_start.u)
        pi = warm_start.pi.copy()
        s = np.concatenate([warm_start.s, np.zeros((N + 1, 2 * nv))], axis=1)
        lam1 = np.concatenate([warm_start.lam, warm_start.lam_ub, warm_start.lam_lb], axis=1)
        lam2 = np.concatenate([warm_start.lam_s, np.zeros((N + 1, 2 * nv))], axis=1)
        sol = _to_solution(pb, rows, w, pi, s, lam1, lam2)
        res = kkt_residuals(pb, sol)
        if res.max() <= tol:
            return finish(sol, STATUS_SOLVED, 0)
        Gw = np.einsum("kmi,ki->km", G, w)
        s = np.where(soft, np.maximum(s, 1e-4), 0.0)
        t1 = np.maximum(h - Gw + s, 1e-4)
        lam1 = np.maximum(lam1, 1e-4)
        lam2 = np.maximum(lam2, 1e-4)
    else:
        w = np.zeros((N + 1, nv))
        w[0, :nx] = pb.x0
        pi = np.zeros((N, nx))
        Gw = np.einsum("kmi,ki->km", G, w)
        s = np.where(soft, np.maximum(Gw - h, 0.0) + 1.0, 0.0)
        t1 = np.maximum(h - Gw + s, 1.0)
        lam1 = np.ones_like(t1)
        lam2 = np.ones_like(t1)
    t1 = np.where(act, t1, 1.0)
    lam1 = np.where(act, lam1, 0.0)
    t2 = np.where(soft, s, 1.0)
    lam2 = np.where(soft, lam2, 0.0)

    GT = np.ascontiguousarray(np.swapaxes(G, 1, 2))
    A, B, c, x0 = pb.A, pb.B, np.ascontiguousarray(pb.c), pb.x0
    it = 0
    status = STATUS_MAX_ITER
    best, best_res, first_ok = None, np.inf, None
    while True:
        sol = _to_solution(pb, rows, w, pi, s, lam1, lam2)
        res = kkt_residuals(pb, sol).max()
        if res < best_res:
            best, best_res = sol, res
        if first_ok is None and res <= tol:
            first_ok = it
        # polish past the reported tolerance so objective values are accurate
        # too, but give up on that once progress stalls at the rounding floor
        if res <= _POLISH * tol or (first_ok is not None and it - first_ok >= _POLISH_ITERS):
            status = STATUS_SOLVED
            break
        if np.max(lam1, initial=0.0) > _INFEASIBLE_DUAL:
            status = STATUS_INFEASIBLE
            break
        if it >= max_iter:
            break
        it += 1

        mu = (np.sum(t1 * lam1 * act) + np.sum(t2 * lam2 * soft)) / max(rows.n_comp, 1)
        D1 = np.where(act, lam1 / t1, 0.0)
        D2 = np.where(soft, lam2 / t2, 0.0)
        S = np.where(soft, Zq + D1 + D2, 1.0)
        Wrow = np.where(soft, D1 * (1.0 - D1 / S), D1)
        Hh = np.ascontiguousarray(pb.H + (GT * Wrow[:, None, :]) @ G)
        P, K, Qinv, Qux, ok = _riccati_factor(Hh, A, B)
        if not ok:
            if it == 1:
                raise QpNotConvexError("reduced Hessian is singular; inputs need regularization")
            # late breakdown: the barrier weights have outrun double precision
            status = STATUS_NUMERICAL
            break

        Gw = np.einsum("kmi,ki->km", G, w)
        q = np.ascontiguousarray(pb.H @ w[:, :, None])[:, :, 0] + pb.g + (GT @ lam1[:, :, None])[:, :, 0]
        r_dyn = w[1:, :nx] - (A @ w[:-1, :nx, None])[:, :, 0] - (B @ w[:-1, nx:, None])[:, :, 0] - c
        r_p1 = np.where(act, Gw - s + t1 - h, 0.0)
        r_p2 = np.where(soft, t2 - s, 0.0)
        r_s = np.where(soft, Zq * s + zl - lam1 - lam2, 0.0)
        c_lq = np.ascontiguousarray(-r_dyn)
        zero_x0 = np.zeros(nx)

        def newton(c1, c2):
            a1 = np.where(act, (c1 - lam1 * t1) / t1 + D1 * r_p1, 0.0)
            a2 = np.where(soft, (c2 - lam2 * t2) / t2 + D2 * r_p2, 0.0)
            e = np.where(soft, a1 - D1 * (a1 + a2 - r_s) / S, a1)
            gh = np.ascontiguousarray(q + (GT @ e[:, :, None])[:, :, 0])
            dw, pin = _riccati_solve(P, K, Qinv, Qux, gh, A, B, c_lq, zero_x0)
            Gdw = np.einsum("kmi,ki->km", G, dw)
            ds = np.where(soft, (a1 + a2 - r_s + D1 * Gdw) / S, 0.0)
            dl1 = np.where(act, a1 + D1 * (Gdw - ds), 0.0)
            dl2 = np.where(soft, a2 - D2 * ds, 0.0)
            dt1 = np.where(act, -r_p1 - Gdw + ds, 0.0)
            dt2 = np.where(soft, -r_p2 + ds, 0.0)
            return dw, pin - pi, ds, dt1, dt2, dl1, dl2

        def max_step(dt1, dt2, dl1, dl2):
            alpha = 1.0
            for v, dv, mask in ((t1, dt1, act), (t2, dt2, soft), (lam1, dl1, act), (lam2, dl2, soft)):
                neg = mask & (dv < 0)
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-v[neg] / dv[neg])))
            return alpha

        zero = np.zeros_like(t1)
        d_aff = newton(zero, zero)
        a_aff = max_step(d_aff[3], d_aff[4], d_aff[5], d_aff[6])
        mu_aff = (
            np.sum((t1 + a_aff * d_aff[3]) * (lam1 + a_aff * d_aff[5]) * act)
            + np.sum((t2 + a_aff * d_aff[4]) * (lam2 + a_aff * d_aff[6]) * soft)
        ) / max(rows.n_comp, 1)
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        c1 = sigma * mu - d_aff[3] * d_aff[5]
        c2 = sigma * mu - d_aff[4] * d_aff[6]
        dw, dpi, ds, dt1, dt2, dl1, dl2 = newton(c1, c2)
        alpha = min(1.0, _TAU * max_step(dt1, dt2, dl1, dl2))

        w = w + alpha * dw
        pi = pi + alpha * dpi
        s = s + alpha * ds
        t1 = t1 + alpha * dt1
        t2 = t2 + alpha * dt2
        lam1 = lam1 + alpha * dl1
        lam2 = lam2 + alpha * dl2
    if best_res <= tol:
        status = STATUS_SOLVED
    return finish(best, status, it)


# ---------------------------------------------------------------------------
# plain-text dump for reproducing solver issues


_FIELDS = ("A", "B", "c", "x0", "H", "g", "lb", "ub", "G", "h", "soft", "Zq", "zl")


def dump_problem(problem: QpProblem) -> str:
    """Serialize as lines ``name d1 d2 ...`` followed by one line of values."""
    out = io.StringIO()
    out.write("# stage-structured QP dump: header 'name shape...', then flattened C-order values\n")
    for name in _FIELDS:
        arr = np.asarray(getattr(problem, name), dtype=float)
        out.write(name + " " + " ".join(str(d) for d in arr.shape) + "\n")
        out.write((" ".join(repr(float(v)) for v in arr.ravel()) or "-") + "\n")
    return out.getvalue()


def load_problem(text: str) -> QpProblem:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    arrays = {}
    for head, body in zip(lines[::2], lines[1::2]):
        name, *shape = head.split()
        shape = tuple(int(d) for d in shape)
        vals = np.zeros(0) if body.strip() == "-" else np.array([float(v) for v in body.split()])
        arrays[name] = vals.reshape(shape)
    arrays["soft"] = arrays["soft"].astype(bool)
    return QpProblem(**arrays)
