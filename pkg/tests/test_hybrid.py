import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_states
from hybridflight.flightdyn import DEFAULT_LIMITS, OUTPUT_IDX, model_derivative, rk4_step
from hybridflight.hybrid import (
    Disturbance,
    HybridConfig,
    HybridController,
    MonitoringError,
    authority_factor,
    calibrate_mismatch_bound,
    feedforward_mismatch,
    hybrid_control,
    ideal_feedforward,
    safety_filter,
    stability_margin,
)
from hybridflight.smc import References, SlidingModeController, SmcGains, lie_derivatives, tracking_errors

ETA = 0.1
Y = list(OUTPUT_IDX)


# -- authority factor ----------------------------------------------------------------


def test_authority_examples():
    cfg = HybridConfig()
    assert authority_factor([0.1, 0, 0], cfg) == 1.0
    assert authority_factor([0, 0, 0], cfg) == 0.3
    assert authority_factor([0, 0, 0.05], cfg) == 0.3
    assert authority_factor([0, -0.0501, 0], cfg) == 1.0


def test_authority_hysteresis():
    cfg = HybridConfig()
    assert authority_factor([0.048, 0, 0], cfg, previous=1.0) == 1.0
    assert authority_factor([0.044, 0, 0], cfg, previous=1.0) == 0.3
    assert authority_factor([0.048, 0, 0], cfg, previous=0.3) == 0.3


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.sampled_from([None, 0.3, 1.0]))
def test_authority_in_unit_interval(e, prev):
    z = authority_factor(e, HybridConfig(zeta_in=0.4), prev)
    assert z in (0.4, 1.0)


# -- safety filter ------------------------------------------------------------------


def test_filter_examples():
    cfg = HybridConfig()
    u, hits, fault = safety_filter([0.1, -0.2, 0.3], cfg)
    assert u.tolist() == [0.1, -0.2, 0.3] and hits == 0 and not fault
    u, hits, _ = safety_filter([0.5, 0.0, 0.0], cfg)
    assert u[0] == 0.175 and hits == 1
    u, hits, fault = safety_filter([np.nan, 0.1, np.inf], cfg)
    assert u.tolist() == [0.0, 0.1, 0.0] and hits == 1 and fault


@given(st.lists(st.floats(allow_nan=True, allow_infinity=True), min_size=3, max_size=3))
def test_filter_idempotent(u):
    cfg = HybridConfig(ff_lower=(-0.1, -0.2, -0.3), ff_upper=(0.1, 0.2, 0.3))
    once = safety_filter(u, cfg)[0]
    twice, hits, fault = safety_filter(once, cfg)
    np.testing.assert_array_equal(once, twice)
    assert hits == 0 and not fault


def test_config_validation():
    with pytest.raises(ValueError):
        HybridConfig(zeta_in=0.0)
    with pytest.raises(ValueError):
        HybridConfig(d_bar=-0.1)
    with pytest.raises(ValueError):
        HybridConfig(ff_upper=(0.5, 0.436, 0.524))
    cfg = HybridConfig.from_dict({"delta_bar": [0.1, 0.2, 0.3], "ff_lower": [-0.1, -0.1, -0.1]})
    assert cfg.delta_bar == (0.1, 0.2, 0.3) and cfg.ff_lower == (-0.1, -0.1, -0.1)


# -- stability margin -------------------------------------------------------------


def test_margin_examples():
    margin, rho = stability_margin(0.7, np.full(3, 1.3), 0.0, 0.0)
    np.testing.assert_allclose(margin, 0.91)
    np.testing.assert_array_equal(rho, 0.0)
    margin, rho = stability_margin(1.0, np.full(3, 2.0), 0.1, 0.1)
    np.testing.assert_allclose(margin, 1.8)
    np.testing.assert_allclose(rho, 0.1)
    margin, _ = stability_margin(0.3, np.full(3, 0.5), 0.1, 0.1)
    np.testing.assert_allclose(margin, -0.05, atol=1e-15)
    with pytest.raises(MonitoringError):
        stability_margin(0.5, np.zeros(3), 0.1, 0.1)


def _on_phi(ctl, x, refs, phi):
    """Set the controller integral so the sliding variable equals ``phi``."""
    g = ctl.gains
    lin = lie_derivatives(x, ctl.smc.params, ctl.smc.aero, ETA)
    e = tracking_errors(x[Y], refs.y)
    ctl.smc.e_int = (phi - lin.Lf_y - g.lambda1 * e) / g.lambda2


def test_negative_margin_falls_back(aero, params, trim, caplog):
    x = trim[0].as_array()
    refs = References.setpoint(x[1] + 0.01, 0.0, 0.0)
    gains = SmcGains(K=2.0, eps_gain=0.1)
    for fallback in (True, False):
        cfg = HybridConfig(delta_bar=0.1, d_bar=0.1, fallback_on_negative_margin=fallback)
        ctl = HybridController(gains, cfg, params, aero, ETA, 0.01)
        _on_phi(ctl, x, refs, np.full(3, 0.04))
        with caplog.at_level(logging.WARNING, logger="hybridflight.hybrid"):
            caplog.clear()
            _, tel = ctl.control(x, refs, np.zeros(3))
        np.testing.assert_allclose(tel.kappa, 0.5)
        if fallback:
            assert tel.fallback and tel.zeta == 1.0
            np.testing.assert_allclose(tel.margin, 0.3)
            assert not caplog.records
        else:
            assert not tel.fallback and tel.zeta == 0.3
            np.testing.assert_allclose(tel.margin, -0.05, atol=1e-12)
            assert "negative stability margin" in caplog.text


def test_telemetry_identities(aero, params):
    cfg = HybridConfig(delta_bar=(0.1, 0.05, 0.2), d_bar=0.02)
    for x in random_states(np.random.default_rng(3), 5, alpha=(-0.1, 0.9)):
        refs = References.setpoint(x[1] + 0.02, x[2], x[6])
        u, tel = hybrid_control([0.01, 0.0, -0.01], x, refs, SmcGains(), cfg, params, aero, ETA)
        bound = np.array(cfg.delta_bar) + cfg.d_bar
        np.testing.assert_allclose(tel.rho, bound / (tel.zeta * tel.kappa), rtol=1e-15)
        np.testing.assert_allclose(tel.margin, tel.zeta * tel.kappa - bound, rtol=1e-15)
        assert np.all(tel.V_L >= 0) and np.array_equal(tel.V_L, 0.5 * tel.phi**2)
        assert np.all(u.surfaces >= DEFAULT_LIMITS.lo) and np.all(u.surfaces <= DEFAULT_LIMITS.hi)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(0, 1000))
def test_actuator_compliance(u_ff, seed):
    from hybridflight.flightdyn import VehicleParams, default_aero_dataset

    x = random_states(np.random.default_rng(seed), 1, alpha=(-0.1, 0.9))[0]
    refs = References.setpoint(0.3, 0.0, 0.0)
    u, _ = hybrid_control(u_ff, x, refs, SmcGains(), HybridConfig(), VehicleParams(), default_aero_dataset(), ETA)
    s = u.surfaces
    assert np.all(s >= DEFAULT_LIMITS.lo) and np.all(s <= DEFAULT_LIMITS.hi)


# -- out-of-distribution supervision ------------------------------------------------


def test_repeated_clamping_trips_fallback(aero, params, trim):
    x = trim[0].as_array()
    refs = References.setpoint(x[1], 0.0, 0.0)
    ctl = HybridController(SmcGains(), HybridConfig(), params, aero, ETA, 0.01)
    flags = [ctl.control(x, refs, [1.0, 0.0, 0.0])[1] for _ in range(60)]
    assert [t.fallback for t in flags].index(True) == 49
    assert all(t.zeta == 1.0 for t in flags[49:])
    assert flags[-1].interventions == 60


def test_non_finite_policy_output_contained(aero, params, trim):
    x = trim[0].as_array()
    ctl = HybridController(SmcGains(), HybridConfig(), params, aero, ETA, 0.01)
    u, tel = ctl.control(x, References.setpoint(x[1]), [np.nan, 0.0, 0.0])
    assert np.all(np.isfinite(u.surfaces)) and tel.fallback and ctl.faults == 1


# -- reduction to pure SMC -----------------------------------------------------------


def test_zero_feedforward_full_authority_is_smc_bitwise(aero, params, trim):
    x = trim[0].as_array().copy()
    x[2], x[6] = 0.05, 0.3
    refs = References.setpoint(0.2)
    gains = SmcGains(width=0.05)
    smc = SlidingModeController(gains, params, aero, ETA, 0.01)
    hyb = HybridController(gains, HybridConfig(zeta_in=1.0), params, aero, ETA, 0.01)
    xs, xh = x.copy(), x.copy()
    for _ in range(150):
        us, _ = smc.control(xs, refs)
        uh, tel = hyb.control(xh, refs, np.zeros(3))
        assert tel.zeta == 1.0
        assert np.array_equal(us.surfaces, uh.surfaces)
        step = lambda z, u: rk4_step(lambda s: model_derivative(s, u.surfaces, ETA, params, aero), z, 0.01)  # noqa: E731
        xs, xh = step(xs, us), step(xh, uh)
    assert np.array_equal(smc.e_int, hyb.smc.e_int)


# -- feedforward quality -----------------------------------------------------------


def test_mismatch_examples(aero, params):
    for x in random_states(np.random.default_rng(9), 5, alpha=(-0.1, 0.9)):
        lin = lie_derivatives(x, params, aero, ETA)
        u_ideal = np.array([0.02, -0.03, 0.01])
        np.testing.assert_array_equal(feedforward_mismatch(u_ideal, u_ideal, lin), 0.0)
        np.testing.assert_allclose(feedforward_mismatch(np.zeros(3), u_ideal, lin), -lin.LgLf_y @ u_ideal)


def test_ideal_feedforward_zeroes_relaxed_sliding_rate(aero, params, trim):
    """phi_dot = (1 - zeta) delta + zeta u_s on the design model; delta = 0 here."""
    gains = SmcGains()
    cfg = HybridConfig()
    rng = np.random.default_rng(4)
    for _ in range(6):
        x = trim[0].as_array() + np.r_[rng.uniform(-5, 5), rng.uniform(-0.02, 0.02, 8), 0.0]
        refs = References.setpoint(x[1] + 0.01, x[2] - 0.01, x[6] + 0.02)
        ctl = HybridController(gains, cfg, params, aero, ETA, 0.01)
        lin = lie_derivatives(x, params, aero, ETA)
        e = tracking_errors(x[Y], refs.y)
        u_ideal = ideal_feedforward(lin, refs, e, lin.Lf_y, gains)
        u, tel = ctl.control(x, refs, u_ideal)
        assert tel.zeta == 0.3 and not ctl.last_saturated.any()
        y_dd = lin.Lf2_y + lin.LgLf_y @ u.surfaces
        phi_dot = y_dd + gains.lambda1 * lin.Lf_y + gains.lambda2 * e
        u_s = -tel.kappa * np.sign(tel.phi)
        np.testing.assert_allclose(phi_dot, tel.zeta * u_s, atol=1e-9)


def _design_loop(ctl, x, refs, steps, feedforward):
    params, aero = ctl.smc.params, ctl.smc.aero
    phis, rhos = [], []
    for _ in range(steps):
        u, tel = ctl.control(x, refs, feedforward(x))
        phis.append(tel.phi)
        rhos.append(tel.rho)
        x = rk4_step(lambda s: model_derivative(s, u.surfaces, ETA, params, aero), x, 0.01)
    return np.array(phis), np.array(rhos)


def test_ideal_feedforward_shrinks_tube(aero, params, trim):
    gains = SmcGains()
    x0 = trim[0].as_array().copy()
    x0[1] += 0.02
    refs = References.setpoint(0.1)
    ctl = HybridController(gains, HybridConfig(), params, aero, ETA, 0.01)

    def ideal(x):
        lin = lie_derivatives(x, params, aero, ETA)
        e = tracking_errors(x[Y], refs.y)
        return ideal_feedforward(lin, refs, e, lin.Lf_y, gains)

    phis, _ = _design_loop(ctl, x0, refs, 300, ideal)
    # reaching at rate >= zeta * eps, then chattering of one step's reach
    assert np.max(np.abs(phis[-100:])) < 0.01 * 0.3 * (2.0 * 0.05**0.5 + 0.05)


def test_constant_bias_stays_in_measured_tube(aero, params, trim):
    gains = SmcGains()
    bias = np.array([-0.01, 0.01, -0.01])
    x0 = trim[0].as_array().copy()
    refs = References.setpoint(0.1)
    deltas = []

    def biased(x):
        lin = lie_derivatives(x, params, aero, ETA)
        e = tracking_errors(x[Y], refs.y)
        deltas.append(feedforward_mismatch(bias, ideal_feedforward(lin, refs, e, lin.Lf_y, gains), lin))
        return bias

    probe = HybridController(gains, HybridConfig(), params, aero, ETA, 0.01)
    _design_loop(probe, x0, refs, 200, biased)
    delta_bar = np.max(np.abs(deltas), axis=0)
    cfg = HybridConfig(delta_bar=tuple(delta_bar), fallback_on_negative_margin=False)
    ctl = HybridController(gains, cfg, params, aero, ETA, 0.01)
    phis, rhos = _design_loop(ctl, x0, refs, 400, lambda x: bias)
    inside = np.abs(phis) <= rhos
    for k in range(3):
        first = int(np.argmax(inside[:, k]))
        assert inside[first, k]
        assert np.all(np.abs(phis[first:, k]) <= 1.2 * rhos[first:, k] + 1e-3)


def test_calibration_matches_brute_force(aero, params):
    gains = SmcGains()
    rng = np.random.default_rng(0)
    xs = random_states(rng, 200, alpha=(-0.2, 1.5))
    xs[:5, 1] = 1.7  # outside the aero tables, skipped
    alpha_d = rng.uniform(-0.085, 0.68, 200)
    ff = rng.uniform(DEFAULT_LIMITS.lo, DEFAULT_LIMITS.hi, (200, 3))
    lookup = {r.tobytes(): f for r, f in zip(xs, ff)}
    samples = [(x, References.setpoint(a)) for x, a in zip(xs, alpha_d)]
    worst, used = calibrate_mismatch_bound(samples, lambda x, r: lookup[x.tobytes()], gains, params, aero, ETA)
    assert used == 195
    expect = np.zeros(3)
    for x, a, f in list(zip(xs, alpha_d, ff))[5:]:
        lin = lie_derivatives(x, params, aero, ETA)
        e = tracking_errors(x[Y], [a, 0, 0])
        u_i = np.linalg.solve(lin.LgLf_y, -gains.lambda1 * lin.Lf_y - gains.lambda2 * e - lin.Lf2_y)
        expect = np.maximum(expect, np.abs(lin.LgLf_y @ (f - u_i)))
    np.testing.assert_allclose(worst, expect, rtol=1e-9)


# -- disturbances -------------------------------------------------------------------


def test_disturbance_kinds():
    assert Disturbance()(1.0) is None
    np.testing.assert_array_equal(Disturbance("constant", 0.2)(3.0), [0.2, 0.2, 0.2])
    s = Disturbance("sinusoid", (1.0, 2.0, 3.0), frequency=0.25)
    np.testing.assert_allclose(s(1.0), [1.0, 2.0 * np.sin(np.pi / 2 + 2 * np.pi / 3), 3.0 * np.sin(np.pi / 2 + 4 * np.pi / 3)])
    na, nb = Disturbance("noise", 0.5, seed=3), Disturbance("noise", 0.5, seed=3)
    a = [na(t) for t in range(200)]
    b = [nb(t) for t in range(200)]
    np.testing.assert_array_equal(a, b)
    assert np.max(np.abs(a)) <= 0.5 and np.max(np.abs(a)) > 0.45
    with pytest.raises(ValueError):
        Disturbance("gust")
