"""Learned feedforward plus sliding-mode feedback, with runtime monitoring.

The applied command is ``sat(u_ff + zeta * u_fb)``. The feedback is designed
against the acceleration the filtered feedforward alone would produce::

    accel_ff = Lf2y + LgLfy @ u_ff
    u_fb     = LgLfy^-1 (-accel_ff + y_ref'' - lambda1 e' - lambda2 e + u_s)

so with ``zeta = 1`` the feedforward is cancelled exactly and the law reduces
to plain SMC. Inside the small-error tube ``zeta`` relaxes and the
feedforward mismatch enters the sliding dynamics as a bounded matched
perturbation.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .flightdyn import DEFAULT_LIMITS, ControlInput, FlightDynamicsError, saturate_surfaces
from .smc import (
    NearSingularityError,
    SlidingModeController,
    lie_derivatives,
    reaching_gain,
    solve_decoupled,
)

log = logging.getLogger(__name__)


class MonitoringError(ValueError):
    """Boundary radius undefined (zero effective reaching gain)."""


@dataclass(frozen=True)
class HybridConfig:
    """Authority scheduling, uncertainty bounds and the feedforward cap.

    Attributes:
        zeta_in: Feedback authority inside the error tube, in (0, 1].
        error_threshold: Any |e| above this (rad) selects full authority.
        hysteresis: Fractional band below the threshold before relaxing again.
        delta_bar: Assumed bound on the feedforward mismatch (rad/s^2),
            scalar or per axis.
        d_bar: Assumed bound on the external disturbance (rad/s^2), scalar
            or per axis.
        ff_lower, ff_upper: Per-channel authority cap on the feedforward (rad).
        fallback_on_negative_margin: Force zeta = 1 after a negative margin.
        ood_clamp_limit: Clamp events within ``ood_window`` steps that trip the
            out-of-distribution fallback.
    """

    zeta_in: float = 0.3
    error_threshold: float = 0.05
    hysteresis: float = 0.1
    delta_bar: float = 0.0
    d_bar: float = 0.0
    ff_lower: tuple = DEFAULT_LIMITS.lower
    ff_upper: tuple = DEFAULT_LIMITS.upper
    fallback_on_negative_margin: bool = True
    ood_clamp_limit: int = 50
    ood_window: int = 100

    def __post_init__(self):
        if not 0.0 < self.zeta_in <= 1.0:
            raise ValueError("zeta_in must lie in (0, 1]")
        for name in ("delta_bar", "d_bar"):
            v = getattr(self, name)
            v = float(v) if np.ndim(v) == 0 else tuple(float(a) for a in np.broadcast_to(v, (3,)))
            object.__setattr__(self, name, v)
            if np.any(np.asarray(v) < 0):
                raise ValueError("uncertainty bounds must be non-negative")
        lo, hi = np.asarray(self.ff_lower, float), np.asarray(self.ff_upper, float)
        if np.any(lo > hi) or np.any(lo < DEFAULT_LIMITS.lo) or np.any(hi > DEFAULT_LIMITS.hi):
            raise ValueError("feedforward cap must sit inside the actuator range")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("ff_lower", "ff_upper"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class StabilityTelemetry:
    phi: np.ndarray
    kappa: np.ndarray
    zeta: float
    margin: np.ndarray
    rho: np.ndarray
    V_L: np.ndarray
    interventions: int
    fallback: bool = False
    u_ff: np.ndarray = field(default_factory=lambda: np.zeros(3))


def authority_factor(errors, config, previous=None):
    """Feedback authority zeta for the current tracking errors.

    Full authority when any |e| exceeds the threshold. When ``previous`` was
    full authority the errors must also drop below the hysteresis band
    before relaxing to ``zeta_in``.
    """
    e = np.abs(np.asarray(errors, dtype=float))
    if np.any(e > config.error_threshold):
        return 1.0
    if previous == 1.0 and np.any(e > config.error_threshold * (1.0 - config.hysteresis)):
        return 1.0
    return config.zeta_in


def safety_filter(u_ff, config):
    """Clamp the proposed feedforward to the authority cap.

    Returns ``(filtered, interventions, fault)``. Non-finite components are
    zeroed and flagged as a policy fault; any clamp or fault counts as one
    intervention.
    """
    u = np.array(u_ff, dtype=float)
    fault = not np.all(np.isfinite(u))
    if fault:
        u = np.where(np.isfinite(u), u, 0.0)
    lo, hi = np.asarray(config.ff_lower, float), np.asarray(config.ff_upper, float)
    clamped = np.minimum(np.maximum(u, lo), hi)
    hit = bool(np.any(clamped != u)) or fault
    return clamped, int(hit), fault


def stability_margin(zeta, kappa, delta_bar, d_bar):
    """``(margin, rho)`` with margin = zeta kappa - (delta_bar + d_bar) and
    rho = (delta_bar + d_bar) / (zeta kappa)."""
    zk = zeta * np.asarray(kappa, dtype=float)
    if np.any(zk <= 0):
        raise MonitoringError("zeta * kappa must be positive for a finite boundary radius")
    bound = np.asarray(delta_bar, dtype=float) + np.asarray(d_bar, dtype=float)
    return zk - bound, bound / zk


def ideal_feedforward(lin, refs, e, e_dot, gains):
    """Model-inverting deflections that make the sliding variable stationary."""
    target = refs.y_ddot - gains.lambda1 * e_dot - gains.lambda2 * e - lin.Lf2_y
    return solve_decoupled(lin, target)


def feedforward_mismatch(u_ff, u_ideal, lin):
    """delta = LgLfy (u_ff - u_ideal): output-acceleration error of the feedforward."""
    return lin.LgLf_y @ (np.asarray(u_ff, float) - np.asarray(u_ideal, float))


def calibrate_mismatch_bound(samples, policy, gains, params, aero, eta):
    """Monte-Carlo estimate of the per-axis mismatch bound.

    ``samples`` yields ``(state_array, References)``; ``policy(x, refs)``
    returns feedforward deflections. Samples where the decoupling matrix is
    singular or the state leaves the aero domain are skipped. Returns
    ``(delta_bar_per_axis, n_used)``.
    """
    from .smc import tracking_errors

    worst = np.zeros(3)
    used = 0
    for x, refs in samples:
        try:
            lin = lie_derivatives(x, params, aero, eta)
            e = tracking_errors(np.asarray(x)[[1, 2, 6]], refs.y)
            u_ideal = ideal_feedforward(lin, refs, e, lin.Lf_y - refs.y_dot, gains)
        except (FlightDynamicsError, np.linalg.LinAlgError):
            continue
        u_ff = policy(x, refs)
        worst = np.maximum(worst, np.abs(feedforward_mismatch(u_ff, u_ideal, lin)))
        used += 1
    return worst, used


class HybridController:
    """Per-simulation hybrid controller state: SMC integral, zeta history,
    intervention counts and the supervisory fallback."""

    def __init__(self, gains, config, params, aero, eta, dt, limits=DEFAULT_LIMITS):
        self.config = config
        self.smc = SlidingModeController(gains, params, aero, eta, dt, limits)
        self.limits = limits
        self.reset()

    @property
    def gains(self):
        return self.smc.gains

    def reset(self):
        self.smc.reset()
        self.zeta_prev = None
        self.interventions = 0
        self.faults = 0
        self.fallbacks = 0
        self._was_negative = False
        self._clamps = deque(maxlen=self.config.ood_window)

    def control(self, state, refs, u_ff):
        smc = self.smc
        cfg = self.config
        x = state.as_array() if hasattr(state, "as_array") else np.asarray(state, dtype=float)
        lin = lie_derivatives(x, smc.params, smc.aero, smc.eta, condition_limit=smc.condition_limit)
        sliding = smc.surface(x, refs, lin)

        u_ff_f, hit, fault = safety_filter(u_ff, cfg)
        self.interventions += hit
        self.faults += int(fault)
        self._clamps.append(hit)
        ood = fault or sum(self._clamps) >= cfg.ood_clamp_limit

        zeta = authority_factor(sliding.e, cfg, self.zeta_prev)
        kappa = reaching_gain(sliding.phi, smc.gains)
        # the margin is checked at the candidate zeta so the fallback never lags a step
        margin, rho = stability_margin(zeta, kappa, cfg.delta_bar, cfg.d_bar)
        negative = bool(np.any(margin < 0))
        fallback = ood or (negative and cfg.fallback_on_negative_margin and zeta < 1.0)
        if fallback:
            zeta = 1.0
            margin, rho = stability_margin(zeta, kappa, cfg.delta_bar, cfg.d_bar)
        still_negative = bool(np.any(margin < 0))
        # warn on entry into a negative margin, not on every step
        if still_negative and not self._was_negative:
            log.warning("negative stability margin %s (zeta=%.3g)", np.round(margin, 4), zeta)
        self._was_negative = still_negative
        self.fallbacks += int(fallback)
        self.zeta_prev = zeta

        if np.any(u_ff_f):
            accel_ff = lin.Lf2_y + lin.LgLf_y @ u_ff_f
            u_fb, _ = smc.feedback(lin, refs, sliding, accel_ff)
            requested = u_ff_f + zeta * u_fb
        else:
            u_fb, _ = smc.feedback(lin, refs, sliding, lin.Lf2_y)
            requested = u_fb if zeta == 1.0 else zeta * u_fb
        self.last_saturated = smc.commit(sliding, requested)
        smc.last = sliding
        u = saturate_surfaces(requested, self.limits)

        telemetry = StabilityTelemetry(
            phi=sliding.phi,
            kappa=kappa,
            zeta=zeta,
            margin=margin,
            rho=rho,
            V_L=0.5 * sliding.phi**2,
            interventions=self.interventions,
            fallback=fallback,
            u_ff=u_ff_f,
        )
        return ControlInput.from_surfaces(u, smc.eta), telemetry


def hybrid_control(u_ff, state, refs, gains, config, params, aero, eta, dt=0.01, controller=None):
    """One-shot hybrid evaluation; pass ``controller`` to keep per-run state."""
    ctl = controller or HybridController(gains, config, params, aero, eta, dt)
    return ctl.control(state, refs, u_ff)


@dataclass
class Disturbance:
    """Bounded additive body angular acceleration (rad/s^2) on p, q, r.

    kind is ``none``, ``constant``, ``sinusoid`` or ``noise`` (uniform in
    +-amplitude, seeded). Sinusoids use ``amplitude * sin(2 pi f t + phase)``
    with a per-axis phase offset of 2 pi k / 3.
    """

    kind: str = "none"
    amplitude: tuple = (0.0, 0.0, 0.0)
    frequency: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "constant", "sinusoid", "noise"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        self.amplitude = tuple(float(a) for a in np.broadcast_to(self.amplitude, (3,)))
        self._rng = np.random.default_rng(self.seed)

    @property
    def bound(self):
        return np.abs(np.asarray(self.amplitude))

    def __call__(self, t):
        amp = np.asarray(self.amplitude)
        if self.kind == "none":
            return None
        if self.kind == "constant":
            return amp.copy()
        if self.kind == "sinusoid":
            ph = 2.0 * math.pi * np.arange(3) / 3.0
            return amp * np.sin(2.0 * math.pi * self.frequency * t + ph)
        return self._rng.uniform(-1.0, 1.0, 3) * amp

    @classmethod
    def from_dict(cls, d):
        return cls(**d) if d else cls()


__all__ = [
    "Disturbance",
    "HybridConfig",
    "HybridController",
    "MonitoringError",
    "NearSingularityError",
    "StabilityTelemetry",
    "authority_factor",
    "calibrate_mismatch_bound",
    "feedforward_mismatch",
    "hybrid_control",
    "ideal_feedforward",
    "safety_filter",
    "stability_margin",
]
