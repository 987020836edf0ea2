"""Closed-loop scenario runner, run metrics, phase-plane export and comparisons.

A scenario holds fixed controls for ``hold_time`` seconds (the spin entry),
then hands over to the selected controller. Every step is logged with the
state, applied deflections and, for SMC and hybrid runs, the sliding-mode
telemetry.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import ENVELOPE_EXIT, SINGULARITY, EnvConfig, InitBounds, check_termination, make_observation, scale_action
from .flightdyn import (
    DEFAULT_LIMITS,
    IDX,
    STATE_NAMES,
    DomainError,
    FlightDynamicsError,
    VehicleConfig,
    advance,
    default_aero_dataset,
    load_aero_dataset,
    load_vehicle_config,
)
from .hybrid import Disturbance, HybridConfig, HybridController, ideal_feedforward
from .smc import References, SlidingModeController, SmcGains, lie_derivatives, reaching_gain, tracking_errors

CONTROLLERS = ("rl", "smc", "hybrid")
SETTLING_TOL = 0.017
_AXES = ("alpha", "beta", "mu")

TRAJECTORY_COLUMNS = (
    ("t", "phase") + STATE_NAMES + ("alpha_d", "beta_d", "mu_d", "delta_e", "delta_a", "delta_r")
    + tuple(f"u_ff_{a}" for a in ("e", "a", "r"))
    + tuple(f"phi_{a}" for a in _AXES) + tuple(f"kappa_{a}" for a in _AXES) + ("zeta",)
    + tuple(f"margin_{a}" for a in _AXES) + tuple(f"rho_{a}" for a in _AXES)
    + ("interventions", "saturated")
)  # fmt: skip
_COL = {c: i for i, c in enumerate(TRAJECTORY_COLUMNS)}


class ConfigurationError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    """Everything needed to reproduce one closed-loop run.

    ``initial_state`` is a mapping of state names (missing entries default
    to zero) or ``None`` to sample from ``bounds`` with ``seed``. ``targets``
    of ``None`` samples alpha_d from the same bounds. ``feedforward`` picks
    the hybrid's u_ff source: ``policy``, ``zero``, ``ideal`` (model inverse)
    or a constant 3-list in radians.
    """

    controller: str = "smc"
    name: str = "scenario"
    seed: int = 0
    initial_state: dict = None
    targets: list = None
    duration: float = 60.0
    dt: float = 0.01
    eta: float = None
    hold_time: float = 0.0
    hold_controls: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    gains: dict = field(default_factory=dict)
    hybrid: dict = field(default_factory=dict)
    feedforward: object = "policy"
    policy_path: str = None
    disturbance: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    vehicle_path: str = None
    aero_path: str = None

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigurationError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if not self.duration > 0 or not self.dt > 0:
            raise ConfigurationError("duration and dt must be positive")
        if self.hold_time < 0:
            raise ConfigurationError("hold_time must be non-negative")
        ff = self.feedforward
        if not (ff in ("policy", "zero", "ideal") or (isinstance(ff, (list, tuple)) and len(ff) == 3)):
            raise ConfigurationError(f"unknown feedforward {ff!r}")
        if self.initial_state is not None:
            unknown = set(self.initial_state) - set(STATE_NAMES)
            if unknown:
                raise ConfigurationError(f"unknown state names {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            cfg = cls.from_dict(json.load(fh))
        base = Path(path).parent
        for attr in ("policy_path", "vehicle_path", "aero_path"):
            p = getattr(cfg, attr)
            if p and not Path(p).is_absolute() and (base / p).exists():
                setattr(cfg, attr, str(base / p))
        return cfg

    def to_dict(self):
        return asdict(self)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ScenarioConfig.from_dict(d)


def initial_conditions(config):
    """``(state_array, targets)`` for the scenario, sampling where unspecified."""
    rng = np.random.default_rng(config.seed)
    bounds = InitBounds(**{k: tuple(v) for k, v in config.bounds.items()})
    if config.initial_state is None:
        x = np.zeros(len(STATE_NAMES))
        for name in ("V", "alpha", "beta", "p", "q", "r", "mu", "gamma"):
            x[IDX[name]] = rng.uniform(*getattr(bounds, name))
    else:
        x = np.array([float(config.initial_state.get(n, 0.0)) for n in STATE_NAMES])
    if config.targets is None:
        targets = np.array([rng.uniform(*bounds.alpha_d), 0.0, 0.0])
    else:
        targets = np.asarray(config.targets, dtype=float)
    return x, targets


@dataclass
class RunMetrics:
    """Per-channel metrics over the engaged span; ``None`` marks undefined values."""

    settling_time: list
    overshoot: list
    steady_state_error: list
    total_variation: list
    saturation_duty: float
    altitude_loss: float
    interventions: object
    limit_violations: int
    reason: str
    engaged_time: float

    def to_dict(self):
        return asdict(self)


@dataclass
class RunResult:
    config: ScenarioConfig
    rows: np.ndarray
    metrics: RunMetrics
    reason: str
    initial_state: np.ndarray
    targets: np.ndarray

    def column(self, name):
        return self.rows[:, _COL[name]]

    def write_csv(self, path):
        write_trajectory(path, self.rows)


def write_trajectory(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(c, v) for c, v in zip(TRAJECTORY_COLUMNS, row)])


def read_trajectory(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRAJECTORY_COLUMNS:
            raise ConfigurationError("trajectory CSV header does not match the documented schema")
        rows = [[_parse(c, v) for c, v in zip(header, r)] for r in reader]
    return np.array(rows, dtype=float).reshape(-1, len(TRAJECTORY_COLUMNS))


def _fmt(col, v):
    if col == "phase":
        return "hold" if v == 0 else "active"
    if col in ("interventions", "saturated"):
        return "" if math.isnan(v) else str(int(v))
    return "" if math.isnan(v) else repr(float(v))


def _parse(col, v):
    if col == "phase":
        return 0.0 if v == "hold" else 1.0
    return float("nan") if v == "" else float(v)


# ---------------------------------------------------------------- metrics


def settling_time(t, err, tol=SETTLING_TOL):
    """First time after which ``|err| <= tol`` for the rest of the record."""
    err = np.abs(np.asarray(err, dtype=float))
    if len(err) == 0 or err[-1] > tol:
        return None
    outside = np.nonzero(err > tol)[0]
    if len(outside) == 0:
        return float(t[0])
    return float(t[outside[-1] + 1])


def overshoot(y, target):
    """Largest excursion past ``target`` in the direction of initial approach.

    A record that starts on target has no approach direction and reports 0.
    """
    y = np.asarray(y, dtype=float)
    s = np.sign(target - y[0])
    if s == 0:
        return 0.0
    return float(max(0.0, np.max(s * (y - target))))


def total_variation(u):
    u = np.asarray(u, dtype=float)
    if len(u) < 2:
        return np.zeros(u.shape[1:]) if u.ndim > 1 else 0.0
    return np.sum(np.abs(np.diff(u, axis=0)), axis=0)


def compute_metrics(rows, targets, reason, limits=DEFAULT_LIMITS):
    active = rows[rows[:, _COL["phase"]] == 1.0]
    h = rows[:, _COL["h"]]
    alt_loss = float(max(0.0, h[0] - np.min(h))) if len(h) else None
    u_all = rows[:, [_COL["delta_e"], _COL["delta_a"], _COL["delta_r"]]]
    violations = int(np.sum(np.any((u_all < limits.lo) | (u_all > limits.hi), axis=1)))
    if len(active) == 0:
        return RunMetrics([None] * 3, [None] * 3, [None] * 3, [None] * 3, None, alt_loss, None,
                          violations, reason, 0.0)  # fmt: skip
    t = active[:, _COL["t"]] - active[0, _COL["t"]]
    y = active[:, [_COL["alpha"], _COL["beta"], _COL["mu"]]]
    err = np.array([tracking_errors(row, targets) for row in y])
    u = active[:, [_COL["delta_e"], _COL["delta_a"], _COL["delta_r"]]]
    tail = err[-max(1, len(err) // 10) :]
    at_limit = np.any((np.abs(u - limits.lo) <= 1e-12) | (np.abs(u - limits.hi) <= 1e-12), axis=1)
    iv = active[-1, _COL["interventions"]]
    return RunMetrics(
        settling_time=[settling_time(t, err[:, k]) for k in range(3)],
        overshoot=[overshoot(targets[k] + err[:, k], targets[k]) for k in range(3)],
        steady_state_error=[float(np.mean(np.abs(tail[:, k]))) for k in range(3)],
        total_variation=[float(v) for v in total_variation(u)],
        saturation_duty=float(np.mean(at_limit)),
        altitude_loss=alt_loss,
        interventions=None if math.isnan(iv) else int(iv),
        limit_violations=violations,
        reason=reason,
        engaged_time=float(t[-1] + (rows[1, 0] - rows[0, 0] if len(rows) > 1 else 0.0)),
    )


# ---------------------------------------------------------------- runner


def _load_model(config, params=None, aero=None):
    """``(params, aero, eta)``; the scenario's eta overrides the vehicle file's."""
    vehicle = load_vehicle_config(config.vehicle_path) if config.vehicle_path else VehicleConfig()
    if params is None:
        params = vehicle.params
    if aero is None:
        aero = load_aero_dataset(config.aero_path) if config.aero_path else default_aero_dataset()
    eta = vehicle.eta if config.eta is None else config.eta
    return params, aero, eta


def _load_policy(config, policy):
    if policy is not None:
        return policy
    if not config.policy_path:
        raise ConfigurationError(f"controller {config.controller!r} needs policy_path")
    from .learner import load_weights

    return load_weights(config.policy_path)


def run_scenario(config, csv_path=None, params=None, aero=None, policy=None):
    """Simulate the scenario at fixed step; returns a :class:`RunResult`.

    An envelope exit or a simulator/controller singularity ends the run
    early; ``reason`` reads ``"<kind>: <detail>"`` and metrics cover the
    realised span.
    """
    params, aero, eta = _load_model(config, params, aero)
    limits = DEFAULT_LIMITS
    gains = SmcGains.from_dict(config.gains)
    x, targets = initial_conditions(config)
    x0 = x.copy()
    refs = References(targets)
    dist = Disturbance.from_dict(config.disturbance)
    hold = np.asarray(config.hold_controls, dtype=float)
    if not np.array_equal(hold, np.clip(hold, limits.lo, limits.hi)):
        raise ConfigurationError("hold_controls outside actuator limits")

    smc = hyb = net = None
    if config.controller == "smc":
        smc = SlidingModeController(gains, params, aero, eta, config.dt, limits)
    elif config.controller == "hybrid":
        hyb = HybridController(gains, HybridConfig.from_dict(config.hybrid), params, aero,
                               eta, config.dt, limits)  # fmt: skip
        if config.feedforward == "policy":
            net = _load_policy(config, policy)
    else:
        net = _load_policy(config, policy)

    n_steps = int(round(config.duration / config.dt))
    n_hold = int(round(config.hold_time / config.dt))
    rows = np.full((n_steps, len(TRAJECTORY_COLUMNS)), np.nan)
    reason = "completed"
    k_done = 0
    env_cfg = EnvConfig(max_steps=n_steps + 1)
    for k in range(n_steps):
        t = k * config.dt
        row = rows[k]
        row[_COL["t"]] = t
        row[_COL["phase"]] = 0.0 if k < n_hold else 1.0
        row[2 : 2 + len(STATE_NAMES)] = x
        row[_COL["alpha_d"] : _COL["alpha_d"] + 3] = targets
        sat = 0.0
        try:
            if k < n_hold:
                u = hold
            elif smc is not None:
                ctl, info = smc.control(x, refs)
                u = ctl.surfaces
                _log_sliding(row, info["sliding"].phi, gains)
                sat = float(info["saturated"].any())
            elif hyb is not None:
                u_ff = _feedforward(config.feedforward, x, targets, refs, net, hyb, limits)
                ctl, tel = hyb.control(x, refs, u_ff)
                u = ctl.surfaces
                _log_telemetry(row, tel)
                sat = float(hyb.last_saturated.any())
            else:
                a = net.act(make_observation(x, targets))
                u = scale_action(a, limits)
                row[_COL["u_ff_e"] : _COL["u_ff_e"] + 3] = u
            row[_COL["delta_e"] : _COL["delta_e"] + 3] = u
            row[_COL["saturated"]] = sat
            x = advance(x, u, eta, config.dt, params, aero, limits, dist(t))
        except DomainError:
            # the integrator left the aero tables: same outcome as an alpha exit
            reason = f"{ENVELOPE_EXIT}: alpha"
            k_done = k + 1
            break
        except FlightDynamicsError as exc:
            reason = f"{SINGULARITY}: {exc}"
            k_done = k + 1
            break
        done, why, detail = check_termination(x, 0, env_cfg)
        k_done = k + 1
        if done:
            reason = f"{why}: {detail}"
            break
    rows = rows[:k_done]
    # a failing step leaves its control columns unset; drop it from the record
    if len(rows) and np.isnan(rows[-1, _COL["delta_e"]]):
        rows = rows[:-1]
    metrics = compute_metrics(rows, targets, reason, limits)
    result = RunResult(config, rows, metrics, reason, x0, targets)
    if csv_path:
        result.write_csv(csv_path)
    return result


def spin_entry_seeds(config, count, max_tries=200, params=None, aero=None):
    """Seeds, from ``config.seed`` upward, whose held-control entry stays in the envelope.

    Only the hold phase is simulated. Returns ``(accepted, rejected)``; a
    seed is rejected when the hold alone ends in an envelope exit or a
    singularity, so there is no spin left to recover.
    """
    params, aero, eta = _load_model(config, params, aero)
    hold = np.asarray(config.hold_controls, dtype=float)
    n_hold = int(round(config.hold_time / config.dt))
    env_cfg = EnvConfig(max_steps=n_hold + 1)
    accepted, rejected = [], []
    for seed in range(config.seed, config.seed + max_tries):
        if len(accepted) == count:
            break
        dist = Disturbance.from_dict(config.disturbance)
        x, _ = initial_conditions(config.replace(seed=seed))
        ok = True
        try:
            for k in range(n_hold):
                x = advance(x, hold, eta, config.dt, params, aero, DEFAULT_LIMITS, dist(k * config.dt))
                if check_termination(x, 0, env_cfg)[0]:
                    ok = False
                    break
        except FlightDynamicsError:
            ok = False
        (accepted if ok else rejected).append(seed)
    return accepted, rejected


def _feedforward(kind, x, targets, refs, net, hyb, limits):
    if kind == "policy":
        return scale_action(net.act(make_observation(x, targets)), limits)
    if kind == "zero":
        return np.zeros(3)
    if kind == "ideal":
        smc = hyb.smc
        lin = lie_derivatives(x, smc.params, smc.aero, smc.eta)
        s = smc.surface(x, refs, lin)
        return ideal_feedforward(lin, refs, s.e, s.e_dot, smc.gains)
    return np.asarray(kind, dtype=float)


def _log_sliding(row, phi, gains):
    row[_COL["phi_alpha"] : _COL["phi_alpha"] + 3] = phi
    row[_COL["kappa_alpha"] : _COL["kappa_alpha"] + 3] = reaching_gain(phi, gains)


def _log_telemetry(row, tel):
    row[_COL["u_ff_e"] : _COL["u_ff_e"] + 3] = tel.u_ff
    row[_COL["phi_alpha"] : _COL["phi_alpha"] + 3] = tel.phi
    row[_COL["kappa_alpha"] : _COL["kappa_alpha"] + 3] = tel.kappa
    row[_COL["zeta"]] = tel.zeta
    row[_COL["margin_alpha"] : _COL["margin_alpha"] + 3] = tel.margin
    row[_COL["rho_alpha"] : _COL["rho_alpha"] + 3] = tel.rho
    row[_COL["interventions"]] = tel.interventions


# ---------------------------------------------------------------- analysis


@dataclass
class PhasePlane:
    channel: str
    y: np.ndarray
    y_dot: np.ndarray
    high_rate: np.ndarray
    start: tuple
    end: tuple

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("channel", "y", "y_dot", "rate_tag", "marker"))
            n = len(self.y)
            for i in range(n):
                marker = "start" if i == 0 else ("end" if i == n - 1 else "")
                tag = "high" if self.high_rate[i] else "low"
                w.writerow((self.channel, repr(float(self.y[i])), repr(float(self.y_dot[i])), tag, marker))


def phase_plane_export(rows, channel, threshold=0.17):
    """``(y, y_dot)`` pairs for one output channel, tagged by ``||omega|| > threshold``.

    ``y_dot`` is the finite-difference rate of the logged channel.
    Consecutive identical points are merged.
    """
    if channel not in _AXES:
        raise ValueError(f"channel must be one of {_AXES}")
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or len(rows) == 0:
        raise ValueError("empty trajectory")
    t = rows[:, _COL["t"]]
    y = rows[:, _COL[channel]]
    # fixed-step logs: central differences, exact zero on flat segments
    y_dot = np.gradient(y) / np.gradient(t) if len(y) > 1 else np.zeros(1)
    w = np.linalg.norm(rows[:, [_COL["p"], _COL["q"], _COL["r"]]], axis=1)
    high = w > threshold
    keep = np.ones(len(y), dtype=bool)
    keep[1:] = (np.diff(y) != 0) | (np.diff(y_dot) != 0) | (np.diff(high) != 0)
    y, y_dot, high = y[keep], y_dot[keep], high[keep]
    return PhasePlane(channel, y, y_dot, high, (y[0], y_dot[0]), (y[-1], y_dot[-1]))


_METRIC_FIELDS = ("settling_time", "overshoot", "steady_state_error", "total_variation",
                  "saturation_duty", "altitude_loss", "interventions")  # fmt: skip


def _delta(a, b):
    if isinstance(a, list):
        return [_delta(x, y) for x, y in zip(a, b)]
    if a is None or b is None:
        return None
    return b - a


def compare_controllers(results, names=None):
    """Aligned metrics for two or more runs plus deltas against the first.

    Raises ConfigurationError when the runs do not share initial conditions.
    """
    if len(results) < 2:
        raise ConfigurationError("need at least two runs to compare")
    base = results[0]
    for r in results[1:]:
        if not (np.array_equal(r.initial_state, base.initial_state)
                and np.array_equal(r.targets, base.targets)):  # fmt: skip
            raise ConfigurationError("runs do not share initial conditions and targets")
    names = names or [r.config.name for r in results]
    table = []
    for name, r in zip(names, results):
        m = r.metrics.to_dict()
        entry = {"name": name, "controller": r.config.controller, "reason": r.reason}
        entry.update({f: m[f] for f in _METRIC_FIELDS})
        entry["delta"] = {f: _delta(base.metrics.to_dict()[f], m[f]) for f in _METRIC_FIELDS}
        table.append(entry)
    return table
