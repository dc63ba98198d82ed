import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmpcc.vehicle import (IDELTA, IOMEGA, IPHI, IT, IVX, IVY, IX, NX, ModelError, TireParams, VehicleParams,
                            dump_params, extract_features, force_deviation_to_state_error, integrate_step,
                            lateral_tire_forces, linearize_discretize, load_params, longitudinal_forces,
                            nominal_derivative, slip_angles, slip_angles_checked, steady_torque, tire_forces,
                            velocity_accelerations, velocity_matrix_form)

from oracles import fd_jacobians

P = VehicleParams()
TIRES = TireParams()


def state(**kw):
    x = dict(X=0.0, Y=0.0, phi=0.0, vx=10.0, vy=0.0, omega=0.0, T=0.0, delta=0.0)
    x.update(kw)
    return np.array(list(x.values()))


def random_state(rng, n=None):
    size = () if n is None else (n,)
    x = np.zeros(size + (NX,))
    x[..., IX] = rng.uniform(-50, 50, size)
    x[..., 1] = rng.uniform(-50, 50, size)
    x[..., IPHI] = rng.uniform(-np.pi, np.pi, size)
    x[..., IVX] = rng.uniform(3, 30, size)
    x[..., IVY] = rng.uniform(-1, 1, size)
    x[..., IOMEGA] = rng.uniform(-0.8, 0.8, size)
    x[..., IT] = rng.uniform(-2000, 1500, size)
    x[..., IDELTA] = rng.uniform(-0.2, 0.2, size)
    return x


# slip angles


def test_slip_angles_straight_running():
    af, ar = slip_angles(state(), P)
    assert af == 0.0 and ar == 0.0


def test_slip_angles_reference_values():
    p = VehicleParams(lf=1.2, lr=1.3)
    af, ar = slip_angles(state(vx=10, vy=0.5, omega=0.2, delta=0.05), p)
    # 0.05 - atan(0.74 / 10) and atan(-0.24 / 10), evaluated by hand
    assert af == pytest.approx(0.05 - math.atan(0.074), abs=1e-12)
    assert af == pytest.approx(-0.02387, abs=1e-5)
    assert ar == pytest.approx(math.atan(-0.024), abs=1e-12)
    assert ar == pytest.approx(-0.02400, abs=1e-5)


def test_slip_angles_without_yaw():
    # with no yaw rate both axles see the same sideslip, -atan(vy / vx)
    p = VehicleParams(lf=1.4, lr=1.4)
    af, ar = slip_angles(state(vy=0.3), p)
    assert af == pytest.approx(-math.atan(0.03), abs=1e-15)
    assert ar == pytest.approx(af, abs=1e-15)


def test_slip_angles_clamp_low_speed():
    af, ar, clamped = slip_angles_checked(state(vx=0.1, vy=0.2), P)
    assert clamped
    assert np.isfinite(af) and np.isfinite(ar)
    assert not slip_angles_checked(state(vx=5.0), P)[2]


# tire forces


def test_lateral_force_zero_at_zero_slip():
    assert lateral_tire_forces(0.0, 0.0, TIRES) == (0.0, 0.0)


def test_lateral_force_slope_at_origin():
    h = 1e-6
    ff, fr = lateral_tire_forces(np.array([h, -h]), np.array([h, -h]), TIRES)
    assert (ff[0] - ff[1]) / (2 * h) == pytest.approx(TIRES.Bf * TIRES.Cf * TIRES.Df, rel=1e-8)
    assert (fr[0] - fr[1]) / (2 * h) == pytest.approx(TIRES.Br * TIRES.Cr * TIRES.Dr, rel=1e-8)


def test_lateral_force_large_slip_limit():
    ff, fr = lateral_tire_forces(1e9, 1e9, TIRES)
    assert ff == pytest.approx(TIRES.Df * math.sin(TIRES.Cf * math.pi / 2), rel=1e-8)
    assert fr == pytest.approx(TIRES.Dr * math.sin(TIRES.Cr * math.pi / 2), rel=1e-8)


@given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_lateral_force_is_odd(af, ar):
    a = lateral_tire_forces(af, ar, TIRES)
    b = lateral_tire_forces(-af, -ar, TIRES)
    assert a[0] == -b[0] and a[1] == -b[1]


def test_longitudinal_coasting():
    p = VehicleParams(kappa=1.0)
    assert longitudinal_forces(0.0, p) == (-p.Cfr, -p.Crr)


def test_longitudinal_split_reference():
    p = VehicleParams(kappa=0.5, r_wheel=0.3, Cfr=0.0, Crr=0.0)
    ffx, frx = longitudinal_forces(100.0, p)
    assert ffx == pytest.approx(166.6667, abs=1e-4)
    assert frx == pytest.approx(166.6667, abs=1e-4)


@given(st.floats(0, 1), st.floats(-5000, 5000))
def test_longitudinal_split_conserves_total(kappa, T):
    p = VehicleParams(kappa=kappa)
    ffx, frx = longitudinal_forces(T, p)
    assert ffx + frx == pytest.approx(T / p.r_wheel - p.Cfr - p.Crr, abs=1e-9)


# continuous dynamics


def test_force_balance_straight_running():
    vx = 20.0
    x = state(vx=vx, T=steady_torque(vx, P))
    d = nominal_derivative(x, np.zeros(2), P, TIRES)
    assert d[IVX] == pytest.approx(0.0, abs=1e-12)
    assert d[IVY] == 0.0 and d[IOMEGA] == 0.0


def test_kinematics_rotation():
    d = nominal_derivative(state(phi=math.pi / 2, vx=5.0, vy=1.0), np.zeros(2), P, TIRES)
    assert d[IX] == pytest.approx(-1.0, abs=1e-12)
    assert d[1] == pytest.approx(5.0, abs=1e-12)


def test_derivative_rate_rows_pass_through():
    d = nominal_derivative(state(), np.array([30.0, -0.01]), P, TIRES)
    assert d[IT] == 30.0 and d[IDELTA] == -0.01


def test_velocity_rows_match_matrix_form():
    rng = np.random.default_rng(1)
    x = random_state(rng, 1000)
    forces = tire_forces(x, P, TIRES)
    direct = np.stack(velocity_accelerations(forces, x, P), axis=-1)
    matrix = velocity_matrix_form(forces, x, P)
    np.testing.assert_allclose(direct, matrix, rtol=0, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_derivative_names_term():
    with pytest.raises(ModelError, match="vxdot"):
        nominal_derivative(state(vx=np.inf), np.zeros(2), P, TIRES)


# integration


def test_integrate_force_balanced_state():
    vx = 15.0
    x = state(vx=vx, T=steady_torque(vx, P))
    nxt = integrate_step(x, np.zeros(2), P, TIRES, 0.1)
    expect = x.copy()
    expect[IX] += vx * 0.1
    np.testing.assert_allclose(nxt, expect, atol=1e-10)


def test_integrate_pure_yaw():
    p = VehicleParams(Cfr=0.0, Crr=0.0, Cw=0.0)
    tires = TireParams(Df=0.0, Dr=0.0)
    x = state(vx=0.0, omega=1.0)
    nxt = integrate_step(x, np.zeros(2), p, tires, 0.1)
    assert nxt[IPHI] == pytest.approx(0.1, abs=1e-12)


def test_integrate_fourth_order_convergence():
    x = state(vx=18.0, vy=0.3, omega=0.25, T=400.0, delta=0.06)
    u = np.array([40.0, 0.01])
    horizon = 0.4

    def roll(n):
        y = x.copy()
        for _ in range(n):
            y = integrate_step(y, u / n, P, TIRES, horizon / n)
        return y

    ref = roll(256)  # dt / 8 of the finest step below
    e1 = np.linalg.norm(roll(16) - ref)
    e2 = np.linalg.norm(roll(32) - ref)
    order = math.log2(e1 / e2)
    assert 3.5 < order < 4.5


def test_integrate_rejects_bad_dt():
    with pytest.raises(ValueError):
        integrate_step(state(), np.zeros(2), P, TIRES, 0.0)


# linearization


def finite_difference_jacobians(x, u, dt):
    return fd_jacobians(lambda xx, uu: integrate_step(xx, uu, P, TIRES, dt), x, u)


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_linearization_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = random_state(rng)
    u = np.array([50.0, 0.01])
    A, B, _ = linearize_discretize(x, u, P, TIRES, 0.05)
    Afd, Bfd = finite_difference_jacobians(x, u, 0.05)
    assert relative_error(A, Afd) <= 1e-4
    assert relative_error(B, Bfd) <= 1e-4


def test_linearization_integrator_rows():
    A, B, _ = linearize_discretize(state(vx=12, omega=0.1, delta=0.03), np.array([5.0, 0.001]), P, TIRES, 0.05)
    np.testing.assert_array_equal(A[IT], np.eye(NX)[IT])
    np.testing.assert_array_equal(A[IDELTA], np.eye(NX)[IDELTA])
    np.testing.assert_array_equal(B[[IT, IDELTA]], np.eye(2))


def test_linearization_affine_remainder():
    x = state(vx=12, vy=0.2, omega=0.1, T=300, delta=0.03)
    u = np.array([5.0, 0.001])
    A, B, c = linearize_discretize(x, u, P, TIRES, 0.1)
    np.testing.assert_allclose(A @ x + B @ u + c, integrate_step(x, u, P, TIRES, 0.1), atol=1e-10)


def test_linearization_frame_invariance():
    x = state(vx=14, vy=-0.2, omega=0.3, T=-200, delta=-0.04, phi=0.7)
    u = np.array([-20.0, 0.002])
    A1, B1, _ = linearize_discretize(x, u, P, TIRES, 0.05)
    x2 = x.copy()
    x2[IX] += 123.0
    x2[1] -= 45.0
    A2, B2, _ = linearize_discretize(x2, u, P, TIRES, 0.05)
    np.testing.assert_allclose(A1[3:6, 3:], A2[3:6, 3:], atol=1e-12)
    np.testing.assert_allclose(B1, B2, atol=1e-12)


def test_linearization_broadcasts():
    rng = np.random.default_rng(5)
    x = random_state(rng, 4)
    u = np.tile([10.0, 0.0], (4, 1))
    A, B, c = linearize_discretize(x, u, P, TIRES, 0.05)
    A0, B0, c0 = linearize_discretize(x[2], u[2], P, TIRES, 0.05)
    np.testing.assert_allclose(A[2], A0, atol=1e-12)
    np.testing.assert_allclose(B[2], B0, atol=1e-12)
    np.testing.assert_allclose(c[2], c0, atol=1e-9)


# force deviations


def test_force_deviation_identical_at_zero_steer():
    rng = np.random.default_rng(0)
    dF = rng.normal(size=(50, 4)) * 500
    np.testing.assert_array_equal(force_deviation_to_state_error(dF, 0.0, P),
                                  force_deviation_to_state_error(dF, 0.0, P, simplified=True))


def test_force_deviation_reference():
    p = VehicleParams(m=1500, Iz=2500, lf=1.2)
    dF = np.array([0.0, 500.0, 0.0, 0.0])
    simp = force_deviation_to_state_error(dF, 0.05, p, simplified=True)
    exact = force_deviation_to_state_error(dF, 0.05, p)
    assert simp[2] == pytest.approx(0.24, abs=1e-12)
    assert exact[2] == pytest.approx(500 * math.cos(0.05) * 1.2 / 2500, abs=1e-12)
    assert abs(exact[2] - simp[2]) <= 0.24 * 0.05**2


def test_force_deviation_zero():
    np.testing.assert_array_equal(force_deviation_to_state_error(np.zeros(4), 0.07, P), np.zeros(3))


@given(st.floats(-0.1, 0.1), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_force_deviation_gap_is_second_order(delta, frac):
    dF = np.array(frac) * 0.1 * np.array([TIRES.Df, TIRES.Df, TIRES.Dr, TIRES.Dr])
    gap = (force_deviation_to_state_error(dF, delta, P)
           - force_deviation_to_state_error(dF, delta, P, simplified=True))
    # the dropped terms are front-force deviations times sin(delta) or (1 - cos(delta))
    front = math.hypot(dF[0], dF[1])
    k = abs(math.sin(delta)) + (1 - math.cos(delta))
    bound = front * k * np.array([1 / P.m, 1 / P.m, P.lf / P.Iz])
    assert np.all(np.abs(gap) <= bound * (1 + 1e-9) + 1e-15)


# features and parameter files


def test_features_straight_coasting():
    np.testing.assert_array_equal(extract_features(state(), P), np.zeros(3))


def test_features_reference():
    p = VehicleParams(lf=1.2, lr=1.3)
    z = extract_features(state(vx=10, vy=0.5, omega=0.2, delta=0.05, T=50.0), p)
    np.testing.assert_allclose(z, [-0.02387, -0.02400, 50.0], atol=1e-5)
    np.testing.assert_array_equal(z[:2], slip_angles(state(vx=10, vy=0.5, omega=0.2, delta=0.05), p))


def test_params_file_round_trip(tmp_path):
    v = VehicleParams(m=1500.0, kappa=0.4)
    t = TireParams(Df=6000.0)
    path = tmp_path / "car.params"
    path.write_text(dump_params(v, t))
    assert load_params(path) == (v, t)


def test_params_file_partial_and_unknown(tmp_path):
    path = tmp_path / "car.params"
    path.write_text("# light car\nm = 900\n\n")
    v, t = load_params(path)
    assert v.m == 900.0 and v.Iz == VehicleParams().Iz and t == TireParams()
    path.write_text("mass = 900\n")
    with pytest.raises(ValueError, match="unknown"):
        load_params(path)


@pytest.mark.parametrize("bad", [dict(m=0.0), dict(kappa=1.5), dict(Cw=-1.0)])
def test_vehicle_params_invariants(bad):
    with pytest.raises(ValueError):
        VehicleParams(**bad)


@pytest.mark.parametrize("bad", [dict(Bf=0.0), dict(Cr=2.5), dict(Dr=-1.0)])
def test_tire_params_invariants(bad):
    with pytest.raises(ValueError):
        TireParams(**bad)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_linearization_property(seed):
    rng = np.random.default_rng(seed)
    x = random_state(rng)
    u = np.array([rng.uniform(-200, 200), rng.uniform(-0.02, 0.02)])
    A, B, _ = linearize_discretize(x, u, P, TIRES, 0.05)
    Afd, Bfd = finite_difference_jacobians(x, u, 0.05)
    assert relative_error(A, Afd) <= 1e-4
    assert relative_error(B, Bfd) <= 1e-4
