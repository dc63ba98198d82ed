import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmpcc.qp import (STATUS_SOLVED, QpDimensionError, QpNotConvexError, QpProblem, QpSolution, dump_problem,
                       kkt_residuals, load_problem, objective, solve)

from oracles import active_set_enumeration, dense_qp, random_structured_qp


def scalar_problem():
    # min (u - 1)^2 s.t. u <= 0.5, written as 1/2 * 2 u^2 - 2 u (+1)
    return QpProblem(A=np.ones((1, 1, 1)), B=np.ones((1, 1, 1)), c=np.zeros((1, 1)), x0=np.zeros(1),
                     H=np.array([[[0.0, 0.0], [0.0, 2.0]], [[0.0, 0.0], [0.0, 0.0]]]),
                     g=np.array([[0.0, -2.0], [0.0, 0.0]]),
                     G=np.array([[[0.0, 1.0]], [[0.0, 0.0]]]), h=np.array([[0.5], [np.inf]]))


def candidate(pb, x, u, lam=None, pi=None):
    N, nx, nu, m = pb.N, pb.nx, pb.nu, pb.m
    return QpSolution(x=np.asarray(x, float).reshape(N + 1, nx), u=np.asarray(u, float).reshape(N, nu),
                      s=np.zeros((N + 1, m)), lam=np.zeros((N + 1, m)) if lam is None else lam,
                      lam_s=np.zeros((N + 1, m)), lam_lb=np.zeros((N + 1, nx + nu)),
                      lam_ub=np.zeros((N + 1, nx + nu)), pi=np.zeros((N, nx)) if pi is None else pi)


def lq_problem(N, nx=4, nu=2, seed=0, rows=2):
    rng = np.random.default_rng(seed)
    A = np.tile(np.eye(nx) + 0.05 * rng.normal(size=(nx, nx)), (N, 1, 1))
    B = np.tile(rng.normal(size=(nx, nu)) * 0.3, (N, 1, 1))
    c = np.tile(rng.normal(size=nx) * 0.01, (N, 1))
    M = rng.normal(size=(nx + nu, nx + nu))
    H = np.tile(M @ M.T / (nx + nu) + 0.1 * np.eye(nx + nu), (N + 1, 1, 1))
    H[N, nx:, :] = 0.0
    H[N, :, nx:] = 0.0
    g = np.tile(rng.normal(size=nx + nu), (N + 1, 1))
    g[N, nx:] = 0.0
    G = np.zeros((N + 1, rows, nx + nu))
    G[:, :, :nx] = rng.normal(size=(rows, nx))
    h = np.full((N + 1, rows), 0.5)
    lb = np.full((N + 1, nx + nu), -np.inf)
    ub = np.full((N + 1, nx + nu), np.inf)
    lb[:N, nx:] = -1.0
    ub[:N, nx:] = 1.0
    soft = np.ones((N + 1, rows), bool)
    return QpProblem(A, B, c, rng.normal(size=nx), H, g, lb=lb, ub=ub, G=G, h=h, soft=soft,
                     Zq=np.full((N + 1, rows), 10.0), zl=np.full((N + 1, rows), 1.0))


# solve


def test_scalar_example():
    sol = solve(scalar_problem())
    assert sol.status == STATUS_SOLVED
    assert sol.u[0, 0] == pytest.approx(0.5, abs=1e-7)
    assert sol.lam[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_equality_only_matches_dense_kkt():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pb = random_structured_qp(rng, max_rows=1)
        pb = QpProblem(pb.A, pb.B, pb.c, pb.x0, pb.H, pb.g)
        Q, q, const, E, e, _, _ = dense_qp(pb)
        n = len(q)
        kkt = np.block([[Q, E.T], [E, np.zeros((len(e), len(e)))]])
        v = np.linalg.solve(kkt, np.concatenate([-q, e]))[:n]
        sol = solve(pb)
        got = np.concatenate([sol.x[1:].ravel(), sol.u.ravel()])
        np.testing.assert_allclose(got, v, atol=1e-8)


def test_random_small_qps_match_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(40):
        pb = random_structured_qp(rng)
        best, _ = active_set_enumeration(pb)
        sol = solve(pb)
        assert sol.status == STATUS_SOLVED
        assert sol.objective == pytest.approx(best, abs=1e-6)
        assert sol.residuals.max() <= 1e-6


def test_residuals_are_recomputed_from_point():
    pb = lq_problem(6, seed=4)
    sol = solve(pb)
    assert sol.residuals == kkt_residuals(pb, sol)
    assert sol.objective == objective(pb, sol.x, sol.u, sol.s)


def test_deterministic():
    pb = lq_problem(20, seed=5)
    a, b = solve(pb), solve(pb)
    for name in ("x", "u", "s", "lam", "pi"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.iterations == b.iterations


def test_warm_start_converges_quickly():
    pb = lq_problem(30, seed=6)
    sol = solve(pb)
    again = solve(pb, warm_start=sol)
    assert again.status == STATUS_SOLVED
    assert again.iterations <= 2


def test_slacks_keep_infeasible_rows_solvable():
    pb = lq_problem(5, seed=7)
    pb.h[:] = -50.0  # no trajectory satisfies these rows
    sol = solve(pb)
    assert sol.status == STATUS_SOLVED
    assert np.all(sol.s >= -1e-9) and sol.s.max() > 1.0


def test_slacks_vanish_when_hard_problem_feasible():
    rng = np.random.default_rng(8)
    checked = 0
    while checked < 15:
        pb = random_structured_qp(rng)
        if not pb.soft.any():
            continue
        hard = QpProblem(pb.A, pb.B, pb.c, pb.x0, pb.H, pb.g, lb=pb.lb, ub=pb.ub, G=pb.G, h=pb.h)
        best_hard, v = active_set_enumeration(hard)
        if not np.isfinite(best_hard):
            continue
        # a linear penalty above every hard multiplier makes the soft optimum the hard one
        heavy = QpProblem(pb.A, pb.B, pb.c, pb.x0, pb.H, pb.g, lb=pb.lb, ub=pb.ub, G=pb.G, h=pb.h, soft=pb.soft,
                          Zq=pb.Zq, zl=np.where(pb.soft, 1e6, 0.0))
        sol = solve(heavy, max_iter=80)
        assert sol.status == STATUS_SOLVED
        assert np.max(sol.s, initial=0.0) <= 1e-6
        assert sol.objective == pytest.approx(best_hard, abs=1e-5)
        checked += 1


def test_linear_cost_in_horizon():
    def per_solve(N):
        pb = lq_problem(N, nx=9, nu=3, seed=9, rows=11)
        solve(pb)  # compile and warm caches
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            sol = solve(pb)
            best = min(best, (time.perf_counter() - t0) / max(sol.iterations, 1))
        return best

    assert per_solve(160) <= 2.5 * per_solve(80)


# errors


def test_dimension_mismatch():
    pb = scalar_problem()
    with pytest.raises(QpDimensionError):
        QpProblem(pb.A, pb.B, pb.c, np.zeros(2), pb.H, pb.g)


def test_non_psd_hessian_rejected():
    pb = scalar_problem()
    H = pb.H.copy()
    H[0, 1, 1] = -2.0
    with pytest.raises(QpNotConvexError):
        solve(QpProblem(pb.A, pb.B, pb.c, pb.x0, H, pb.g, G=pb.G, h=pb.h))


def test_terminal_input_rows_rejected():
    pb = scalar_problem()
    G = pb.G.copy()
    G[1, 0, 1] = 1.0
    with pytest.raises(QpDimensionError):
        QpProblem(pb.A, pb.B, pb.c, pb.x0, pb.H, pb.g, G=G, h=np.array([[0.5], [1.0]]))


# residuals


def test_residuals_at_scalar_optimum():
    pb = scalar_problem()
    r = kkt_residuals(pb, candidate(pb, [0.0, 0.5], [0.5], lam=np.array([[1.0], [0.0]]), pi=np.array([[0.0]])))
    assert r.max() <= 1e-10


def test_stationarity_grows_with_perturbation():
    pb = scalar_problem()
    lam = np.array([[1.0], [0.0]])
    pi = np.array([[0.0]])
    base = kkt_residuals(pb, candidate(pb, [0.0, 0.5], [0.5], lam, pi)).stationarity
    for eps in (1e-3, 2e-3):
        r = kkt_residuals(pb, candidate(pb, [0.0, 0.5 - eps], [0.5 - eps], lam, pi))
        # gradient of (u - 1)^2 changes by 2 * eps
        assert r.stationarity == pytest.approx(base + 2 * eps, rel=1e-9)


def test_zero_problem_has_zero_residuals():
    pb = QpProblem(np.eye(2)[None], np.ones((1, 2, 1)), np.zeros((1, 2)), np.zeros(2),
                   np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)))
    r = kkt_residuals(pb, candidate(pb, np.zeros(4), [0.0]))
    assert r.max() == 0.0


def test_dump_load_round_trip():
    pb = lq_problem(3, seed=10)
    back = load_problem(dump_problem(pb))
    for name in ("A", "B", "c", "x0", "H", "g", "lb", "ub", "G", "h", "soft", "Zq", "zl"):
        np.testing.assert_array_equal(getattr(back, name), getattr(pb, name))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_qp_property(seed):
    pb = random_structured_qp(np.random.default_rng(seed))
    best, _ = active_set_enumeration(pb)
    sol = solve(pb)
    assert sol.solved
    assert sol.objective == pytest.approx(best, abs=1e-6)
    assert sol.residuals.max() <= 1e-6
