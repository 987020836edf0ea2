import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import random_states
from hybridflight.flightdyn import (
    ALPHA_RANGE,
    DEFAULT_LIMITS,
    DERIVATIVE_NAMES,
    AeroDataError,
    AeroTable,
    AircraftState,
    ControlInput,
    DomainError,
    SingularityError,
    VehicleParams,
    advance,
    compute_coefficients,
    load_aero_dataset,
    load_vehicle_config,
    lookup_derivative,
    rk4_step,
    saturate,
    state_derivative,
    step_rk4,
    wrap_angle,
)
from hybridflight.surrogate import build_surrogate_document


def _doc(**override):
    doc = build_surrogate_document()
    doc["tables"].update(override)
    return doc


# -- aero data ------------------------------------------------------------------


def test_bundled_dataset_covers_validity_range(aero):
    assert aero.validity_range == ALPHA_RANGE
    assert "SURROGATE" in aero.label


def test_missing_table_is_named():
    doc = build_surrogate_document()
    del doc["tables"]["C_lp"]
    with pytest.raises(AeroDataError, match="missing derivative C_lp"):
        load_aero_dataset(doc)


def test_non_monotone_grid_rejected():
    with pytest.raises(AeroDataError, match="not strictly increasing"):
        AeroTable(np.array([0.1, 0.05, 0.2]), np.array([1.0, 2.0, 3.0]))


def test_grid_not_covering_range_rejected():
    short = [[a, 0.0] for a in np.linspace(0.0, 1.0, 5)]
    with pytest.raises(AeroDataError):
        load_aero_dataset(_doc(C_L0=short))


def test_bad_entries_and_unparsable_file():
    with pytest.raises(AeroDataError, match="pairs"):
        load_aero_dataset(_doc(C_L0=[[0.0, 1.0, 2.0]]))
    with pytest.raises(AeroDataError, match="parse"):
        load_aero_dataset(io.StringIO("{not json"))


def test_dataset_round_trips_through_file(tmp_path, aero):
    path = tmp_path / "aero.json"
    path.write_text(json.dumps(build_surrogate_document()))
    again = load_aero_dataset(path)
    for a in (-0.2, 0.0, 0.37, 1.5):
        np.testing.assert_array_equal(again.derivatives_at(a), aero.derivatives_at(a))


def test_lookup_exact_at_nodes(aero):
    table = aero["C_m0"]
    for a, v in zip(table.alpha, table.values):
        assert lookup_derivative(table, a) == v


def test_lookup_linear_midpoint_and_domain():
    table = AeroTable(np.array([0.0, 0.1]), np.array([0.2, 0.4]))
    assert lookup_derivative(table, 0.05) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(DomainError):
        lookup_derivative(table, 2.0)


def test_cubic_table_reproduces_smooth_function():
    a = np.linspace(-0.244, 1.571, 92)
    table = AeroTable(a, np.sin(2 * a), interpolation="cubic")
    q = np.linspace(-0.24, 1.57, 333)
    err = max(abs(lookup_derivative(table, x) - math.sin(2 * x)) for x in q)
    assert err < 1e-6


def test_dataset_lookup_matches_per_table_evaluation(aero):
    for a in np.linspace(-0.244, 1.571, 41):
        d = aero.derivatives_at(a)
        for k, name in enumerate(DERIVATIVE_NAMES):
            assert d[k] == pytest.approx(lookup_derivative(aero[name], a), abs=1e-13)


def test_dataset_domain_error(aero):
    with pytest.raises(DomainError):
        aero.derivatives_at(2.0)


# -- coefficients -------------------------------------------------------------------


def test_lift_bias_only(aero, params):
    s = AircraftState(V=300.0, alpha=0.3)
    c = compute_coefficients(s, ControlInput(0.1), params, aero)
    assert c.CL == lookup_derivative(aero["C_L0"], 0.3)


def test_symmetric_lateral_coefficients_vanish(aero, params):
    s = AircraftState(V=300.0, alpha=0.3, q=0.2)
    c = compute_coefficients(s, ControlInput(0.1, -0.1), params, aero)
    assert (c.CY, c.Cl, c.Cn) == (0.0, 0.0, 0.0)


def test_buildup_hand_evaluation(aero, params):
    s = AircraftState(V=350.0, alpha=0.42, beta=0.07, p=0.3, q=-0.2, r=0.15)
    u = ControlInput(0.1, -0.12, 0.08, -0.2)
    c = compute_coefficients(s, u, params, aero)
    D = {n: lookup_derivative(aero[n], s.alpha) for n in DERIVATIVE_NAMES}
    qh = s.q * params.c_bar / (2 * s.V)
    ph = s.p * params.b / (2 * s.V)
    rh = s.r * params.b / (2 * s.V)
    de, da, dr = u.surfaces
    assert c.CL == pytest.approx(D["C_L0"] + D["C_Lq"] * qh + D["C_Lde"] * de, rel=1e-12)
    assert c.CD == pytest.approx(D["C_D0"] + D["C_Dq"] * qh + D["C_Dde"] * de, rel=1e-12)
    assert c.Cm == pytest.approx(D["C_m0"] + D["C_mq"] * qh + D["C_mde"] * de, rel=1e-12)
    for coef, tag in ((c.CY, "Y"), (c.Cl, "l"), (c.Cn, "n")):
        expect = (D[f"C_{tag}beta"] * s.beta + D[f"C_{tag}p"] * ph + D[f"C_{tag}r"] * rh
                  + D[f"C_{tag}de"] * de + D[f"C_{tag}da"] * da + D[f"C_{tag}dr"] * dr)  # fmt: skip
        assert coef == pytest.approx(expect, rel=1e-12, abs=1e-15)


def test_buildup_affine_in_controls(aero, params):
    s = AircraftState(V=350.0, alpha=0.42, beta=0.07, p=0.3, q=-0.2, r=0.15)
    base = np.array([0.05, -0.1, 0.2])

    def coeffs(u):
        c = compute_coefficients(s, ControlInput(0.1, *u), params, aero)
        return np.array([c.CL, c.CD, c.CY, c.Cl, c.Cm, c.Cn])

    for k in range(3):
        for h in (0.01, 0.1):
            up = base.copy()
            up[k] += h
            slope = (coeffs(up) - coeffs(base)) / h
            up[k] += h
            np.testing.assert_allclose((coeffs(up) - coeffs(base)) / (2 * h), slope, atol=1e-12)


def test_zero_airspeed_is_singular(aero, params):
    with pytest.raises(SingularityError):
        compute_coefficients(AircraftState(V=0.0, alpha=0.1), ControlInput(0.1), params, aero)


# -- saturation ----------------------------------------------------------------------


def test_saturation_examples():
    u = saturate(ControlInput(0.1, 0.3, 0.1, -1.0))
    assert (u.delta_e, u.delta_a, u.delta_r) == (0.175, 0.1, -0.524)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(-1, 2))
def test_saturation_idempotent_and_in_bounds(vals, eta):
    once = saturate(ControlInput(eta, *vals))
    assert saturate(once) == once
    s = once.surfaces
    assert np.all(s >= DEFAULT_LIMITS.lo) and np.all(s <= DEFAULT_LIMITS.hi)


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


# -- equations of motion -------------------------------------------------------------


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _body_from_wind(alpha, beta):
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array([[ca, 0, -sa], [0, 1.0, 0], [sa, 0, ca]]) @ _rz(beta)


def _newton_oracle(x, u, params, aero, delta=1e-6):
    """Derivative of (V, alpha, beta, mu, gamma, chi, h) from Newton's law and
    rotation-matrix kinematics in a flat-earth NED frame."""
    V, alpha, beta, p, q, r, mu, gamma, chi, h = x
    c = compute_coefficients(AircraftState(*x), u, params, aero)
    qS = 0.5 * params.rho * V * V * params.S
    R_iw = _rz(chi) @ _ry(gamma) @ _rx(mu)
    C_bw = _body_from_wind(alpha, beta)
    R_ib = R_iw @ C_bw.T
    v_i = R_iw @ np.array([V, 0.0, 0.0])
    f_w = np.array([-qS * c.CD, qS * c.CY, -qS * c.CL])
    thrust_b = np.array([params.Tm * u.eta, 0.0, 0.0])
    a_i = (R_iw @ f_w + R_ib @ thrust_b) / params.m + np.array([0.0, 0.0, params.g])
    w = np.array([[0, -r, q], [r, 0, -p], [-q, p, 0.0]])

    def angles(dt):
        Rb = R_ib @ expm(w * dt)
        vi = v_i + a_i * dt
        vb = Rb.T @ vi
        Vn = np.linalg.norm(vb)
        al = math.atan2(vb[2], vb[0])
        be = math.asin(vb[1] / Vn)
        Rw = Rb @ _body_from_wind(al, be)
        ga = -math.asin(Rw[2, 0])
        ch = math.atan2(Rw[1, 0], Rw[0, 0])
        m_ = math.atan2(Rw[2, 1], Rw[2, 2])
        alt = h - (v_i[2] * dt + 0.5 * a_i[2] * dt * dt)
        return np.array([Vn, al, be, m_, ga, ch, alt])

    d = (angles(delta) - angles(-delta)) / (2 * delta)
    return d


def test_translational_equations_match_newton_oracle(aero, params):
    rng = np.random.default_rng(11)
    for x in random_states(rng, 40):
        u = ControlInput(0.1, *rng.uniform(DEFAULT_LIMITS.lo, DEFAULT_LIMITS.hi))
        f = state_derivative(x, u, params, aero)
        oracle = _newton_oracle(x, u, params, aero)
        ours = f[[0, 1, 2, 6, 7, 8, 9]]
        np.testing.assert_allclose(ours, oracle, rtol=1e-6, atol=1e-6)


def test_moment_equations_hand_evaluation(aero, params):
    x = np.array([320.0, 0.5, 0.1, 0.4, -0.3, 0.2, 0.7, -0.2, 1.0, 0.0])
    u = ControlInput(0.1, -0.2, 0.1, 0.15)
    f = state_derivative(x, u, params, aero)
    c = compute_coefficients(AircraftState(*x), u, params, aero)
    qS = 0.5 * params.rho * x[0] ** 2 * params.S
    P = params
    p, q, r = x[3:6]
    assert f[3] == pytest.approx(((P.Iy - P.Iz) * q * r + qS * P.b * c.Cl) / P.Ix, rel=1e-12)
    assert f[4] == pytest.approx(((P.Iz - P.Ix) * p * r + qS * P.c_bar * c.Cm) / P.Iy, rel=1e-12)
    assert f[5] == pytest.approx(((P.Ix - P.Iy) * p * q + qS * P.b * c.Cn) / P.Iz, rel=1e-12)


def test_lateral_symmetry(aero, params):
    for alpha in (-0.2, 0.1, 0.6, 1.2):
        x = np.array([300.0, alpha, 0, 0, 0.3, 0, 0, 0.1, 0.4, 0.0])
        f = state_derivative(x, ControlInput(0.1, -0.1), params, aero)
        assert np.all(np.abs(f[[2, 3, 5, 6]]) < 1e-15)


def test_beta_rate_without_kinematic_coupling(aero, params):
    x = np.array([300.0, 0.3, 0.0, 0.0, 0.4, 0.0, 0.5, 0.1, 0.0, 0.0])
    u = ControlInput(0.1, 0.0, 0.2, 0.1)
    f = state_derivative(x, u, params, aero)
    c = compute_coefficients(AircraftState(*x), u, params, aero)
    qS = 0.5 * params.rho * x[0] ** 2 * params.S
    mg = params.m * params.g
    expect = (qS * c.CY + mg * math.cos(x[7]) * math.sin(x[6])) / (params.m * x[0])
    assert f[2] == pytest.approx(expect, rel=1e-12)


def test_trim_is_equilibrium(trim, aero, params):
    state, control = trim
    f = state_derivative(state, control, params, aero)
    assert abs(f[0]) < 1e-8 and abs(f[7]) < 1e-10 and abs(f[4]) < 1e-10
    assert state.V > 0 and DEFAULT_LIMITS.lo[0] <= control.delta_e <= DEFAULT_LIMITS.hi[0]


def test_singularities_name_equation(aero, params):
    u = ControlInput(0.1)
    with pytest.raises(SingularityError) as exc:
        state_derivative(np.array([300.0, 0.1, math.pi / 2, 0, 0, 0, 0, 0, 0, 0]), u, params, aero)
    assert exc.value.equation == "alpha"
    with pytest.raises(SingularityError) as exc:
        state_derivative(np.array([300.0, 0.1, 0, 0, 0, 0, 0, math.pi / 2, 0, 0]), u, params, aero)
    assert exc.value.equation == "chi"
    with pytest.raises(SingularityError):
        state_derivative(np.array([-1.0, 0.1, 0, 0, 0, 0, 0, 0, 0, 0]), u, params, aero)


# -- integration ---------------------------------------------------------------------


def test_rk4_exponential_step():
    x1 = rk4_step(lambda x: -x, np.array([1.0]), 0.01)
    assert abs(x1[0] - math.exp(-0.01)) < 1e-10


def test_rk4_fourth_order():
    errs = []
    for dt in (0.04, 0.02, 0.01):
        x = np.array([1.0])
        for _ in range(int(round(1.0 / dt))):
            x = rk4_step(lambda y: -y, x, dt)
        errs.append(abs(x[0] - math.exp(-1.0)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(14.0 < r < 18.0 for r in ratios)


def test_zero_step_identity(trim, aero, params):
    state, control = trim
    assert step_rk4(state, control, 0.0, params, aero) == state


def test_richardson_local_error(aero, params):
    rng = np.random.default_rng(5)
    for x in random_states(rng, 10):
        u = rng.uniform(DEFAULT_LIMITS.lo, DEFAULT_LIMITS.hi)
        full = advance(x, u, 0.1, 0.01, params, aero)
        half = advance(advance(x, u, 0.1, 0.005, params, aero), u, 0.1, 0.005, params, aero)
        scale = np.maximum(1.0, np.abs(x))
        # local RK4 error is O(dt^5): ~1e-10 relative at dt = 0.01
        assert np.max(np.abs(full - half) / scale) < 1e-7


def test_step_wraps_angles(aero, params):
    x = np.array([300.0, 0.1, 0.0, 0.0, 0.0, 0.0, math.pi - 1e-4, 0.0, 0.0, 0.0])
    y = advance(x, [0.0, 0.3, 0.0], 0.1, 0.5, params, aero)
    assert -math.pi < y[6] <= math.pi


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_advance_saturates_controls(seed):
    from hybridflight.flightdyn import default_aero_dataset

    aero_ = default_aero_dataset()
    rng = np.random.default_rng(seed)
    x = random_states(rng, 1)[0]
    u = rng.uniform(-2, 2, 3)
    np.testing.assert_array_equal(
        advance(x, u, 0.1, 0.01, VehicleParams(), aero_),
        advance(x, np.clip(u, DEFAULT_LIMITS.lo, DEFAULT_LIMITS.hi), 0.1, 0.01, VehicleParams(), aero_),
    )


# -- vehicle config -------------------------------------------------------------------


def test_vehicle_config_parsing(tmp_path):
    path = tmp_path / "v.cfg"
    path.write_text("# comment\nm = 1000\neta = 0.2\n")
    cfg = load_vehicle_config(path)
    assert cfg.params.m == 1000.0 and cfg.eta == 0.2 and cfg.params.S == VehicleParams().S
    path.write_text("[vehicle]\nwingspan = 3\n")
    with pytest.raises(ValueError, match="unknown"):
        load_vehicle_config(path)
    with pytest.raises(ValueError, match="positive"):
        VehicleParams(m=-1.0)


def test_bundled_vehicle_config_matches_defaults():
    from pathlib import Path

    cfg = load_vehicle_config(Path(__file__).parents[1] / "configs" / "vehicle.cfg")
    assert cfg.params == VehicleParams() and cfg.eta == 0.1 and cfg.dt == 0.01
