"""Nonlinear 6-DOF aircraft model in wind-axis variables.

State vector layout (``STATE_NAMES``)::

    [V, alpha, beta, p, q, r, mu, gamma, chi, h]

V in ft/s, angles in rad, body rates in rad/s, altitude in ft. The force
equations are written in wind axes with drag along -x_w, side force along
+y_w and lift along -z_w; thrust acts along the body x axis. Moments use
principal inertias only (no Ixz coupling).
"""

import bisect
import configparser
import functools
import io
import json
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

ALPHA_RANGE = (-0.244, 1.571)
COS_TOLERANCE = 1e-6

STATE_NAMES = ("V", "alpha", "beta", "p", "q", "r", "mu", "gamma", "chi", "h")
IDX = {name: i for i, name in enumerate(STATE_NAMES)}
OUTPUT_IDX = (IDX["alpha"], IDX["beta"], IDX["mu"])
WRAPPED_IDX = (IDX["beta"], IDX["mu"], IDX["chi"])

DERIVATIVE_NAMES = (
    "C_L0", "C_Lq", "C_Lde",
    "C_D0", "C_Dq", "C_Dde",
    "C_m0", "C_mq", "C_mde",
    "C_Ybeta", "C_Yp", "C_Yr", "C_Yde", "C_Yda", "C_Ydr",
    "C_lbeta", "C_lp", "C_lr", "C_lde", "C_lda", "C_ldr",
    "C_nbeta", "C_np", "C_nr", "C_nde", "C_nda", "C_ndr",
)  # fmt: skip


class FlightDynamicsError(Exception):
    """Base class for simulator errors."""


class AeroDataError(FlightDynamicsError):
    """Malformed or incomplete aerodynamic table file."""


class DomainError(FlightDynamicsError):
    """Angle of attack outside the tabulated range."""


class SingularityError(FlightDynamicsError):
    """A divide-by-zero condition in the equations of motion.

    ``equation`` names the offending equation (``"V"``, ``"alpha"``,
    ``"chi"``...).
    """

    def __init__(self, equation, message):
        super().__init__(f"{equation}: {message}")
        self.equation = equation


# -- state and controls -------------------------------------------------------


def wrap_angle(a):
    """Wrap to (-pi, pi]; values already in range are returned untouched."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class AircraftState:
    V: float
    alpha: float
    beta: float = 0.0
    p: float = 0.0
    q: float = 0.0
    r: float = 0.0
    mu: float = 0.0
    gamma: float = 0.0
    chi: float = 0.0
    h: float = 0.0

    def as_array(self):
        return np.array([getattr(self, n) for n in STATE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x):
        return cls(*(float(v) for v in x))

    @property
    def outputs(self):
        return np.array([self.alpha, self.beta, self.mu])

    @property
    def omega_norm(self):
        return math.sqrt(self.p**2 + self.q**2 + self.r**2)


@dataclass(frozen=True)
class ControlInput:
    eta: float
    delta_e: float = 0.0
    delta_a: float = 0.0
    delta_r: float = 0.0

    @property
    def surfaces(self):
        return np.array([self.delta_e, self.delta_a, self.delta_r])

    @classmethod
    def from_surfaces(cls, surfaces, eta):
        de, da, dr = (float(v) for v in surfaces)
        return cls(float(eta), de, da, dr)


@dataclass(frozen=True)
class ActuatorLimits:
    """Per-channel deflection bounds (rad), elevator/aileron/rudder order."""

    lower: tuple = (-0.436, -0.436, -0.524)
    upper: tuple = (0.175, 0.436, 0.524)
    eta_range: tuple = (0.0, 1.0)

    @property
    def lo(self):
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self):
        return np.asarray(self.upper, dtype=float)


DEFAULT_LIMITS = ActuatorLimits()


def saturate_surfaces(surfaces, limits=DEFAULT_LIMITS):
    """Clamp a deflection 3-vector; returns a new array."""
    u = np.asarray(surfaces, dtype=float)
    return np.minimum(np.maximum(u, limits.lo), limits.hi)


def saturate(control, limits=DEFAULT_LIMITS):
    """Apply sat(u) channel-wise to a ControlInput."""
    lo_eta, hi_eta = limits.eta_range
    eta = min(max(control.eta, lo_eta), hi_eta)
    return ControlInput.from_surfaces(saturate_surfaces(control.surfaces, limits), eta)


def is_saturated(surfaces, limits=DEFAULT_LIMITS):
    """Per-channel flag: requested deflection lies outside the limits."""
    u = np.asarray(surfaces, dtype=float)
    return (u < limits.lo) | (u > limits.hi)


# -- vehicle ------------------------------------------------------------------


@dataclass(frozen=True)
class VehicleParams:
    """Mass, geometry and propulsion constants (slug, ft, lbf).

    Defaults are F-18 HARV-class public values.
    """

    m: float = 1034.5
    S: float = 400.0
    b: float = 37.42
    c_bar: float = 11.52
    Ix: float = 22789.0
    Iy: float = 176809.0
    Iz: float = 191744.0
    Tm: float = 30000.0
    rho: float = 0.0023769
    g: float = 32.174

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"vehicle parameter {f.name} must be positive, got {v!r}")


@dataclass(frozen=True)
class VehicleConfig:
    params: VehicleParams = VehicleParams()
    eta: float = 0.1
    dt: float = 0.01


def load_vehicle_config(source):
    """Read ``key = value`` lines into a VehicleConfig.

    Keys are the VehicleParams field names plus ``eta`` and ``dt``; unknown
    keys are rejected. A leading section header is optional.
    """
    text = Path(source).read_text() if not hasattr(source, "read") else source.read()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError:
        parser.read_string("[vehicle]\n" + text)
    values = {}
    for section in parser.sections():
        values.update({k: float(v) for k, v in parser.items(section)})
    eta = values.pop("eta", VehicleConfig.eta)
    dt = values.pop("dt", VehicleConfig.dt)
    known = {f.name for f in fields(VehicleParams)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown vehicle config keys: {sorted(unknown)}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return VehicleConfig(VehicleParams(**values), eta=eta, dt=dt)


# -- aerodynamic tables ---------------------------------------------------------


INTERPOLATIONS = ("linear", "cubic")


def _segment_coefficients(alpha, values, interpolation):
    """Per-segment cubic coefficients ``c[k, j]`` so that on segment j
    ``v = ((c0 t + c1) t + c2) t + c3`` with ``t = alpha - alpha_j``."""
    n = alpha.size - 1
    c = np.zeros((4, n))
    if interpolation == "linear":
        c[2] = np.diff(values) / np.diff(alpha)
        c[3] = values[:-1]
    else:
        from scipy.interpolate import CubicSpline

        c[:] = CubicSpline(alpha, values, bc_type="not-a-knot").c
        c[3] = values[:-1]
    return c


@dataclass(frozen=True)
class AeroTable:
    """One derivative tabulated against alpha.

    ``interpolation`` is ``"linear"`` (piecewise-linear) or ``"cubic"``
    (not-a-knot cubic spline, C2 in alpha). Both reproduce node values exactly.
    """

    alpha: np.ndarray
    values: np.ndarray
    interpolation: str = "linear"

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if a.ndim != 1 or a.shape != v.shape or a.size < 2:
            raise AeroDataError("table needs matching 1-D alpha/value arrays with >= 2 nodes")
        if not np.all(np.diff(a) > 0):
            raise AeroDataError("alpha grid is not strictly increasing")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(v))):
            raise AeroDataError("table contains non-finite entries")
        if self.interpolation not in INTERPOLATIONS:
            raise AeroDataError(f"unknown interpolation {self.interpolation!r}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_coef", _segment_coefficients(a, v, self.interpolation))

    def evaluate(self, alpha, nu=0):
        """Interpolant (or its ``nu``-th derivative) at ``alpha``; no range check.

        At interior nodes the right-hand segment is used.
        """
        a = self.alpha
        if alpha >= a[-1] and nu == 0 and alpha == a[-1]:
            return float(self.values[-1])
        j = min(max(bisect.bisect_right(a.tolist(), alpha) - 1, 0), a.size - 2)
        c0, c1, c2, c3 = self._coef[:, j]
        t = alpha - a[j]
        if nu == 0:
            return float(((c0 * t + c1) * t + c2) * t + c3)
        if nu == 1:
            return float((3 * c0 * t + 2 * c1) * t + c2)
        if nu == 2:
            return float(6 * c0 * t + 2 * c1)
        return float(6 * c0)

    def __call__(self, alpha):
        return lookup_derivative(self, alpha)


def lookup_derivative(table, alpha):
    """Interpolate ``table`` at ``alpha`` (rad); outside the grid is an error."""
    lo, hi = table.alpha[0], table.alpha[-1]
    if not lo <= alpha <= hi:
        raise DomainError(f"alpha={alpha:.6g} rad outside table range [{lo}, {hi}]")
    return table.evaluate(alpha)


class AeroDataset:
    """The 27 alpha-dependent derivative tables, plus a fast batched lookup."""

    def __init__(self, tables, label=""):
        missing = [n for n in DERIVATIVE_NAMES if n not in tables]
        if missing:
            raise AeroDataError(f"missing derivative {missing[0]}")
        extra = sorted(set(tables) - set(DERIVATIVE_NAMES))
        if extra:
            raise AeroDataError(f"unknown derivative names: {extra}")
        self.tables = {n: tables[n] for n in DERIVATIVE_NAMES}
        self.label = label
        self.alpha_min = max(t.alpha[0] for t in self.tables.values())
        self.alpha_max = min(t.alpha[-1] for t in self.tables.values())
        if self.alpha_min > ALPHA_RANGE[0] + 1e-12 or self.alpha_max < ALPHA_RANGE[1] - 1e-12:
            raise AeroDataError(
                f"tables cover [{self.alpha_min}, {self.alpha_max}], need {list(ALPHA_RANGE)}"
            )
        # Re-expand every table's piecewise polynomial about the union of all
        # breakpoints so a single bisection serves all 27 lookups.
        grid = np.unique(np.concatenate([t.alpha for t in self.tables.values()]))
        grid = grid[(grid >= self.alpha_min) & (grid <= self.alpha_max)]
        coef = np.empty((grid.size - 1, 4, len(DERIVATIVE_NAMES)))
        last = np.empty(len(DERIVATIVE_NAMES))
        for k, t in enumerate(self.tables.values()):
            for j, g in enumerate(grid[:-1]):
                coef[j, :, k] = [
                    t.evaluate(g, 3) / 6.0,
                    t.evaluate(g, 2) / 2.0,
                    t.evaluate(g, 1),
                    t.evaluate(g),
                ]
            last[k] = t.evaluate(grid[-1])
        self._grid_list = grid.tolist()
        self._coef = coef
        self._last = last

    @property
    def validity_range(self):
        return (self.alpha_min, self.alpha_max)

    def __getitem__(self, name):
        return self.tables[name]

    def derivatives_at(self, alpha):
        """All 27 derivatives at ``alpha`` in DERIVATIVE_NAMES order."""
        if not self.alpha_min <= alpha <= self.alpha_max:
            raise DomainError(
                f"alpha={alpha:.6g} rad outside aero data range "
                f"[{self.alpha_min}, {self.alpha_max}]"
            )
        j = bisect.bisect_right(self._grid_list, alpha) - 1
        if j >= len(self._grid_list) - 1:
            return self._last.copy()
        c = self._coef[j]
        t = alpha - self._grid_list[j]
        return ((c[0] * t + c[1]) * t + c[2]) * t + c[3]


def _parse_tables(doc):
    if not isinstance(doc, dict) or "tables" not in doc:
        raise AeroDataError("aero file must be an object with a 'tables' member")
    raw = doc["tables"]
    interpolation = doc.get("interpolation", "linear")
    missing = [n for n in DERIVATIVE_NAMES if n not in raw]
    if missing:
        raise AeroDataError(f"missing derivative {missing[0]}")
    tables = {}
    for name, pairs in raw.items():
        try:
            arr = np.asarray(pairs, dtype=float)
        except (TypeError, ValueError) as exc:
            raise AeroDataError(f"{name}: entries must be [alpha, value] pairs") from exc
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise AeroDataError(f"{name}: entries must be [alpha, value] pairs")
        try:
            tables[name] = AeroTable(arr[:, 0], arr[:, 1], interpolation)
        except AeroDataError as exc:
            raise AeroDataError(f"{name}: {exc}") from None
    return tables


def load_aero_dataset(source):
    """Load an aero table file (path, file object, or already-parsed dict)."""
    if isinstance(source, dict):
        doc = source
    else:
        if hasattr(source, "read"):
            text = source.read()
        else:
            text = Path(source).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise AeroDataError(f"aero file does not parse: {exc}") from exc
    return AeroDataset(_parse_tables(doc), label=doc.get("label", ""))


@functools.lru_cache(maxsize=1)
def default_aero_dataset():
    """The bundled SURROGATE dataset."""
    text = resources.files("hybridflight").joinpath("data/surrogate_aero.json").read_text()
    return load_aero_dataset(io.StringIO(text))


# -- coefficient buildup and equations of motion -----------------------------------


@dataclass(frozen=True)
class AeroCoefficients:
    CL: float
    CD: float
    CY: float
    Cl: float
    Cm: float
    Cn: float


def _buildup(d, V, alpha, beta, p, q, r, de, da, dr, params, control_forces=True):
    two_v = 2.0 * V
    qh = q * params.c_bar / two_v
    ph = p * params.b / two_v
    rh = r * params.b / two_v
    CL = d[0] + d[1] * qh
    CD = d[3] + d[4] * qh
    CY = d[9] * beta + d[10] * ph + d[11] * rh
    if control_forces:
        CL += d[2] * de
        CD += d[5] * de
        CY += d[12] * de + d[13] * da + d[14] * dr
    Cm = d[6] + d[7] * qh + d[8] * de
    Cl = d[15] * beta + d[16] * ph + d[17] * rh + d[18] * de + d[19] * da + d[20] * dr
    Cn = d[21] * beta + d[22] * ph + d[23] * rh + d[24] * de + d[25] * da + d[26] * dr
    return CL, CD, CY, Cl, Cm, Cn


def compute_coefficients(state, control, params, aero):
    """Linear buildup of the six force/moment coefficients at ``state``."""
    if not state.V > 0:
        raise SingularityError("V", "airspeed must be positive for rate nondimensionalisation")
    d = aero.derivatives_at(state.alpha)
    c = _buildup(
        d, state.V, state.alpha, state.beta, state.p, state.q, state.r,
        control.delta_e, control.delta_a, control.delta_r, params,
    )  # fmt: skip
    return AeroCoefficients(*(float(v) for v in c))


def _rhs(x, de, da, dr, eta, params, aero, control_forces=True, body_accel=None):
    V, alpha, beta, p, q, r, mu, gamma = (float(v) for v in x[:8])
    if not V > 0:
        raise SingularityError("V", f"airspeed {V!r} must be positive")
    cb = math.cos(beta)
    if abs(cb) < COS_TOLERANCE:
        raise SingularityError("alpha", "|cos(beta)| below tolerance")
    cg = math.cos(gamma)
    if abs(cg) < COS_TOLERANCE:
        raise SingularityError("chi", "|cos(gamma)| below tolerance")
    d = aero.derivatives_at(alpha)
    CL, CD, CY, Cl, Cm, Cn = _buildup(d, V, alpha, beta, p, q, r, de, da, dr, params, control_forces)

    m, g = params.m, params.g
    qS = 0.5 * params.rho * V * V * params.S
    T = params.Tm * eta
    sa, ca = math.sin(alpha), math.cos(alpha)
    sb, tb = math.sin(beta), math.tan(beta)
    sm, cm = math.sin(mu), math.cos(mu)
    sg, tg = math.sin(gamma), math.tan(gamma)
    mV = m * V

    # wind-axis angular velocity components fixed by the lateral/normal forces
    wy = (T * sa + qS * CL - m * g * cg * cm) / mV
    wz = (-T * ca * sb + qS * CY + m * g * cg * sm) / mV
    pa = p * ca + r * sa

    Ix, Iy, Iz = params.Ix, params.Iy, params.Iz
    out = np.empty(10)
    out[0] = (T * ca * math.cos(beta) - qS * CD - m * g * sg) / m
    out[1] = q - tb * pa - wy / cb
    out[2] = p * sa - r * ca + wz
    out[3] = (Iy - Iz) / Ix * q * r + qS * params.b * Cl / Ix
    out[4] = (Iz - Ix) / Iy * p * r + qS * params.c_bar * Cm / Iy
    out[5] = (Ix - Iy) / Iz * p * q + qS * params.b * Cn / Iz
    out[6] = pa / cb + tb * wy + tg * (wy * sm + wz * cm)
    out[7] = wy * cm - wz * sm
    out[8] = (wy * sm + wz * cm) / cg
    out[9] = V * sg
    if body_accel is not None:
        out[3] += body_accel[0]
        out[4] += body_accel[1]
        out[5] += body_accel[2]
    return out


def state_derivative(state, control, params, aero, limits=DEFAULT_LIMITS, body_accel=None):
    """Time derivative of the full 10-element state.

    The control is saturated before use. ``body_accel`` is an optional
    additive (p, q, r) angular acceleration used for disturbance injection.
    """
    x = state.as_array() if isinstance(state, AircraftState) else np.asarray(state, dtype=float)
    u = saturate(control, limits)
    return _rhs(x, u.delta_e, u.delta_a, u.delta_r, u.eta, params, aero, body_accel=body_accel)


def model_derivative(x, surfaces, eta, params, aero):
    """Controller design model: control-surface force terms omitted."""
    de, da, dr = surfaces
    return _rhs(x, de, da, dr, eta, params, aero, control_forces=False)


def rk4_step(fun, x, dt):
    """One classical Runge-Kutta step of ``dx/dt = fun(x)``."""
    k1 = fun(x)
    k2 = fun(x + 0.5 * dt * k1)
    k3 = fun(x + 0.5 * dt * k2)
    k4 = fun(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def advance(x, surfaces, eta, dt, params, aero, limits=DEFAULT_LIMITS, body_accel=None):
    """Array-level RK4 step with zero-order-hold, saturated controls."""
    de, da, dr = saturate_surfaces(surfaces, limits).tolist()
    eta = min(max(eta, limits.eta_range[0]), limits.eta_range[1])

    def fun(y):
        return _rhs(y, de, da, dr, eta, params, aero, body_accel=body_accel)

    x_new = rk4_step(fun, np.asarray(x, dtype=float), dt)
    for i in WRAPPED_IDX:
        x_new[i] = wrap_angle(x_new[i])
    return x_new


def step_rk4(state, control, dt, params, aero, limits=DEFAULT_LIMITS, body_accel=None):
    """Advance an AircraftState by ``dt`` seconds."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    x = advance(state.as_array(), control.surfaces, control.eta, dt, params, aero, limits, body_accel)
    return AircraftState.from_array(x)


def trim_level_flight(alpha, params, aero, eta=None, x0=None):
    """Wings-level, constant-speed trim at a given angle of attack.

    Solves for (V, gamma, delta_e) and, when ``eta`` is None, the throttle
    needed for level flight instead of gamma. Returns ``(state, control)``.
    """
    from scipy.optimize import fsolve

    level = eta is None

    def residual(z):
        V, second, de = z
        g_ = 0.0 if level else second
        eta_ = second if level else eta
        x = np.array([V, alpha, 0, 0, 0, 0, 0, g_, 0, 0], dtype=float)
        f = _rhs(x, de, 0.0, 0.0, eta_, params, aero)
        return [f[0], f[7], f[4]]

    guess = x0 if x0 is not None else [400.0, 0.1 if level else 0.0, -0.05]
    z, info, ier, msg = fsolve(residual, guess, full_output=True, xtol=1e-12)
    if ier != 1:
        raise FlightDynamicsError(f"trim did not converge: {msg}")
    V, second, de = z
    gamma = 0.0 if level else second
    eta_out = second if level else eta
    state = AircraftState(V=float(V), alpha=alpha, gamma=float(gamma))
    return state, ControlInput(float(eta_out), float(de), 0.0, 0.0)
