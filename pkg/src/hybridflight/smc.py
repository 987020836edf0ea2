"""Input-output linearisation of (alpha, beta, mu) and the sliding-mode law.

The design model drops the control-surface contributions to lift, drag and
side force, so each output has relative degree two and the deflections only
enter through the body-axis moments::

    y'' = Lf2y(x) + LgLfy(x) @ u

The sliding variable is ``phi = e_dot + lambda1 * e + lambda2 * int(e)`` per
axis. The feedback law picks the auxiliary input so that ``phi_dot`` equals
the reaching term ``-(K |phi|^0.5 + eps) sgn(phi)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .flightdyn import (
    DEFAULT_LIMITS,
    IDX,
    OUTPUT_IDX,
    ControlInput,
    FlightDynamicsError,
    _rhs,
    is_saturated,
    saturate_surfaces,
    wrap_angle,
)

# state components Lf y depends on: V, alpha, beta, p, q, r, mu, gamma
_GRAD_IDX = tuple(range(8))
FD_STEP = 1e-5
CONDITION_LIMIT = 1e6


class NearSingularityError(FlightDynamicsError):
    """Decoupling matrix too ill-conditioned to invert."""


def _per_axis(value):
    arr = np.array(np.broadcast_to(np.asarray(value, dtype=float), (3,)))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SmcGains:
    """Sliding-surface and reaching-law parameters, one entry per axis.

    Scalars broadcast to all three axes (alpha, beta, mu).
    """

    lambda1: np.ndarray = 2.0
    lambda2: np.ndarray = 0.5
    K: np.ndarray = 2.0
    eps_gain: np.ndarray = 0.05
    width: np.ndarray = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "K", "eps_gain", "width"):
            object.__setattr__(self, name, _per_axis(getattr(self, name)))
        if np.any(self.lambda1 <= 0) or np.any(self.lambda2 < 0):
            raise ValueError("need lambda1 > 0 and lambda2 >= 0")
        if np.any(self.eps_gain <= 0) or np.any(self.width < 0):
            raise ValueError("need eps_gain > 0 and width >= 0")

    @classmethod
    def unchecked(cls, **kw):
        """Build gains bypassing sign checks (negative tests only)."""
        obj = object.__new__(cls)
        for name in ("lambda1", "lambda2", "K", "eps_gain", "width"):
            object.__setattr__(obj, name, _per_axis(kw.get(name, getattr(cls, name))))
        return obj

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("lambda1", "lambda2", "K", "eps_gain", "width") if k in d})

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("lambda1", "lambda2", "K", "eps_gain", "width")}


@dataclass(frozen=True)
class SlidingState:
    e: np.ndarray
    e_dot: np.ndarray
    e_int: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True)
class LinearizationResult:
    Lf_y: np.ndarray
    Lf2_y: np.ndarray
    LgLf_y: np.ndarray
    condition: float
    well_conditioned: bool


@dataclass(frozen=True)
class References:
    """Desired outputs and their first two derivatives, (alpha, beta, mu) order."""

    y: np.ndarray
    y_dot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    y_ddot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def setpoint(cls, alpha_d, beta_d=0.0, mu_d=0.0):
        return cls(np.array([alpha_d, beta_d, mu_d], dtype=float))


def _drift(x, params, aero, eta):
    return _rhs(x, 0.0, 0.0, 0.0, eta, params, aero, control_forces=False)


def _lf_y(x, params, aero, eta):
    f = _drift(x, params, aero, eta)
    return f[list(OUTPUT_IDX)], f


def input_matrix(x, params, aero):
    """Columns d(p_dot, q_dot, r_dot)/d(delta_e, delta_a, delta_r), exact."""
    d = aero.derivatives_at(float(x[IDX["alpha"]]))
    V = float(x[0])
    qS = 0.5 * params.rho * V * V * params.S
    kl = qS * params.b / params.Ix
    km = qS * params.c_bar / params.Iy
    kn = qS * params.b / params.Iz
    return np.array(
        [
            [kl * d[18], kl * d[19], kl * d[20]],
            [km * d[8], 0.0, 0.0],
            [kn * d[24], kn * d[25], kn * d[26]],
        ]
    )


def lie_derivatives(state, params, aero, eta, fd_step=FD_STEP, condition_limit=CONDITION_LIMIT):
    """Lf y, Lf^2 y and the decoupling matrix LgLf y at ``state``.

    Lf y is the closed-form output rate of the drift field. Its state
    gradient is taken by central differences (the aero tables are only
    piecewise smooth); step ``fd_step`` is absolute for angles and rates and
    relative for airspeed.
    """
    x = state.as_array() if hasattr(state, "as_array") else np.asarray(state, dtype=float)
    lf, f = _lf_y(x, params, aero, eta)
    jac = np.empty((3, len(_GRAD_IDX)))
    for k, i in enumerate(_GRAD_IDX):
        h = fd_step * max(1.0, abs(x[i])) if i == 0 else fd_step
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, k] = (_lf_y(xp, params, aero, eta)[0] - _lf_y(xm, params, aero, eta)[0]) / (2 * h)
    lf2 = jac @ f[: len(_GRAD_IDX)]
    lglf = jac[:, 3:6] @ input_matrix(x, params, aero)
    cond = float(np.linalg.cond(lglf))
    return LinearizationResult(lf, lf2, lglf, cond, bool(cond < condition_limit))


def sliding_surface(e, e_dot, e_int, gains):
    return np.asarray(e_dot) + gains.lambda1 * np.asarray(e) + gains.lambda2 * np.asarray(e_int)


def smooth_sign(phi, width):
    """sgn(phi) with sgn(0) = 0, replaced by a linear ramp inside ``width``."""
    phi = np.asarray(phi, dtype=float)
    width = np.broadcast_to(np.asarray(width, dtype=float), phi.shape)
    out = np.sign(phi)
    inside = (width > 0) & (np.abs(phi) < width)
    ramp = np.divide(phi, width, out=np.zeros_like(phi), where=inside)
    out = np.where(inside, ramp, out)
    return out


def reaching_gain(phi, gains):
    """kappa = K |phi|^0.5 + eps, per axis."""
    return gains.K * np.sqrt(np.abs(phi)) + gains.eps_gain


def reaching_term(phi, gains):
    phi = np.asarray(phi, dtype=float)
    out = -reaching_gain(phi, gains) * smooth_sign(phi, gains.width)
    return np.where(phi == 0.0, 0.0, out)


def tracking_errors(y, refs_y):
    """Output error with beta and mu differences wrapped to (-pi, pi]."""
    e = np.asarray(y, dtype=float) - np.asarray(refs_y, dtype=float)
    return np.array([e[0], wrap_angle(float(e[1])), wrap_angle(float(e[2]))])


def solve_decoupled(lin, nu_minus_drift, condition_limit=CONDITION_LIMIT):
    if not lin.condition < condition_limit:
        raise NearSingularityError(f"decoupling matrix condition {lin.condition:.3g} over limit")
    return np.linalg.solve(lin.LgLf_y, nu_minus_drift)


class SlidingModeController:
    """Feedback-linearising sliding-mode controller with integral surface.

    One instance per simulation: it owns the running error integral. The
    integral is frozen on steps where any channel saturates.
    """

    def __init__(self, gains, params, aero, eta, dt, limits=DEFAULT_LIMITS,
                 condition_limit=CONDITION_LIMIT):  # fmt: skip
        self.gains = gains
        self.params = params
        self.aero = aero
        self.eta = eta
        self.dt = dt
        self.limits = limits
        self.condition_limit = condition_limit
        self.reset()

    def reset(self):
        self.e_int = np.zeros(3)
        self.last = None
        self.saturation_events = 0

    def surface(self, x, refs, lin):
        y = np.asarray(x, dtype=float)[list(OUTPUT_IDX)]
        e = tracking_errors(y, refs.y)
        e_dot = lin.Lf_y - refs.y_dot
        e_int = self.e_int.copy()
        phi = sliding_surface(e, e_dot, e_int, self.gains)
        return SlidingState(e, e_dot, e_int, phi)

    def feedback(self, lin, refs, sliding, accel_estimate):
        """Deflections that give phi_dot = u_s against ``accel_estimate``.

        ``accel_estimate`` is the output acceleration predicted without
        feedback (Lf2y for pure SMC, Lf2y + LgLfy u_ff for the hybrid law).
        """
        g = self.gains
        u_r = -accel_estimate + refs.y_ddot - g.lambda1 * sliding.e_dot - g.lambda2 * sliding.e
        u_s = reaching_term(sliding.phi, g)
        return solve_decoupled(lin, u_r + u_s, self.condition_limit), u_s

    def commit(self, sliding, requested):
        sat = is_saturated(requested, self.limits)
        if sat.any():
            self.saturation_events += 1
        else:
            self.e_int = sliding.e_int + self.dt * sliding.e
        return sat

    def control(self, state, refs):
        """Return ``(ControlInput, info)`` for the current state."""
        x = state.as_array() if hasattr(state, "as_array") else np.asarray(state, dtype=float)
        lin = lie_derivatives(x, self.params, self.aero, self.eta,
                              condition_limit=self.condition_limit)  # fmt: skip
        sliding = self.surface(x, refs, lin)
        u_raw, u_s = self.feedback(lin, refs, sliding, lin.Lf2_y)
        sat = self.commit(sliding, u_raw)
        u = saturate_surfaces(u_raw, self.limits)
        self.last = sliding
        info = {"sliding": sliding, "lin": lin, "u_s": u_s, "requested": u_raw, "saturated": sat}
        return ControlInput.from_surfaces(u, self.eta), info


def smc_control(state, refs, gains, params, aero, eta, dt=0.01, controller=None):
    """One-shot SMC evaluation; pass ``controller`` to carry the integral state."""
    ctl = controller or SlidingModeController(gains, params, aero, eta, dt)
    u, _ = ctl.control(state, refs)
    return u

