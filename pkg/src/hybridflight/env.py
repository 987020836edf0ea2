"""Spin-recovery MDP around the 6-DOF simulator.

Observation (11): V, alpha, beta, p, q, r, mu, gamma, alpha_d, beta_d, mu_d.
Action (3): normalised elevator, aileron, rudder in [-1, 1].

The reward blends a rate-damping phase and an attitude-tracking phase with a
logistic gate on ``||omega||``, adds per-step attitude bonuses and an action
penalty, and applies potential-based shaping ``Gamma sigma' - sigma``.
"""

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .flightdyn import (
    ALPHA_RANGE,
    DEFAULT_LIMITS,
    IDX,
    STATE_NAMES,
    DomainError,
    FlightDynamicsError,
    SingularityError,
    VehicleParams,
    advance,
    default_aero_dataset,
)
from .smc import tracking_errors

OBS_NAMES = ("V", "alpha", "beta", "p", "q", "r", "mu", "gamma", "alpha_d", "beta_d", "mu_d")
_RATE = 10.0 * math.pi
OBS_LOW = np.array([0.0, ALPHA_RANGE[0], -math.pi, -_RATE, -_RATE, -_RATE, -math.pi, -1.745,
                    ALPHA_RANGE[0], -math.pi, -math.pi])  # fmt: skip
OBS_HIGH = np.array([2000.0, ALPHA_RANGE[1], math.pi, _RATE, _RATE, _RATE, math.pi, 1.745,
                     ALPHA_RANGE[1], math.pi, math.pi])  # fmt: skip
_OBS_STATE_IDX = [IDX[n] for n in OBS_NAMES[:8]]

ENVELOPE_EXIT = "envelope_exit"
SINGULARITY = "singularity"
STEP_LIMIT = "step_limit"
PENALISED_REASONS = frozenset({ENVELOPE_EXIT, SINGULARITY})


class EnvUsageError(RuntimeError):
    """Stepping an environment whose episode has finished."""


@dataclass(frozen=True)
class RewardConfig:
    w_p1: float = 0.3
    w_p21: float = 0.3
    w_p22: float = 0.05
    k_blend: float = 10.0
    omega_th: float = 0.17
    bonus_alpha: float = 5.0
    bonus_beta: float = 3.0
    bonus_mu: float = 3.0
    bonus_tol: float = 0.017
    action_penalty: float = 1.0
    terminal_penalty: float = -1000.0
    discount: float = 0.99

    def __post_init__(self):
        if self.omega_th <= 0 or self.k_blend <= 0:
            raise ValueError("need omega_th > 0 and k_blend > 0")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")


@dataclass(frozen=True)
class InitBounds:
    """Uniform reset ranges (rad, rad/s, ft/s); beta_d and mu_d are fixed at 0."""

    V: tuple = (100.0, 1500.0)
    alpha: tuple = (-0.175, 1.047)
    beta: tuple = (-0.262, 0.262)
    p: tuple = (-2.094, 2.094)
    q: tuple = (-1.047, 1.047)
    r: tuple = (-0.524, 0.524)
    mu: tuple = (-3.142, 3.142)
    gamma: tuple = (-1.047, 1.047)
    alpha_d: tuple = (-0.085, 0.68)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ValueError(f"bound {f.name} has lower > upper")


@dataclass(frozen=True)
class EnvConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    bounds: InitBounds = field(default_factory=InitBounds)
    max_steps: int = 20000
    speed_range: tuple = (50.0, 2000.0)
    dt: float = 0.01
    eta: float = 0.1

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "reward" in d:
            d["reward"] = RewardConfig(**d["reward"])
        if "bounds" in d:
            d["bounds"] = InitBounds(**{k: tuple(v) for k, v in d["bounds"].items()})
        if "speed_range" in d:
            d["speed_range"] = tuple(d["speed_range"])
        return cls(**d)


def phase1_reward(p, q, r, config):
    return -(p * p + q * q + r * r) - config.w_p1 * (abs(p * q) + abs(q * r) + abs(p * r))


def phase2_reward(e_alpha, q, p, r, config):
    # cross term kept as printed: it becomes a bonus when e_alpha and q differ in sign
    coupling = p * p + q * q + r * r + abs(p * q) + abs(q * r) + abs(p * r)
    return -e_alpha * e_alpha - config.w_p21 * e_alpha * q - config.w_p22 * coupling


def blend(omega_norm, config):
    """Logistic gate: ~1 (tracking phase) at low rates, ~0 at high rates."""
    z = config.k_blend * (omega_norm - config.omega_th)
    if z > 0:
        ez = math.exp(-z)
        return ez / (1.0 + ez)
    return 1.0 / (1.0 + math.exp(z))


def potential(e_alpha, omega_sq, config):
    """sigma = -e_alpha^2 - w_p21 ||omega||^2."""
    return -e_alpha * e_alpha - config.w_p21 * omega_sq


def state_potential(x, alpha_d, config):
    p, q, r = x[3], x[4], x[5]
    return potential(x[1] - alpha_d, p * p + q * q + r * r, config)


def scale_action(action, limits=DEFAULT_LIMITS):
    """Map normalised actions to deflections; 0 maps to zero deflection.

    Positive values scale onto the upper limit and negative values onto the
    lower limit, so the asymmetric elevator range keeps neutral at zero.
    """
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    return np.where(a >= 0, a * limits.hi, -a * limits.lo)


def unscale_action(surfaces, limits=DEFAULT_LIMITS):
    u = np.asarray(surfaces, dtype=float)
    return np.where(u >= 0, u / limits.hi, -u / limits.lo)


def check_termination(x, step, config=EnvConfig()):
    """Return ``(done, reason, detail)`` for state array ``x`` after ``step`` steps."""
    alpha, beta, V = x[IDX["alpha"]], x[IDX["beta"]], x[IDX["V"]]
    if not np.all(np.isfinite(x)):
        return True, SINGULARITY, "non-finite state"
    if not ALPHA_RANGE[0] <= alpha <= ALPHA_RANGE[1]:
        return True, ENVELOPE_EXIT, "alpha"
    if abs(beta) > math.pi / 2:
        return True, ENVELOPE_EXIT, "beta"
    if not config.speed_range[0] <= V <= config.speed_range[1]:
        return True, ENVELOPE_EXIT, "V"
    if np.any(np.abs(x[3:6]) > _RATE):
        return True, ENVELOPE_EXIT, "rates"
    if step >= config.max_steps:
        return True, STEP_LIMIT, ""
    return False, None, ""


def make_observation(x, targets):
    obs = np.concatenate([np.asarray(x, dtype=float)[_OBS_STATE_IDX], targets])
    return np.clip(obs, OBS_LOW, OBS_HIGH)


TRACE_COLUMNS = (
    ("t",) + STATE_NAMES + ("alpha_d", "beta_d", "mu_d", "a_e", "a_a", "a_r", "delta_e", "delta_a",
    "delta_r", "r_phase1", "r_phase2", "blend", "bonus", "action_penalty", "pbrs", "terminal",
    "reward", "reason")
)  # fmt: skip


class SpinRecoveryEnv:
    """Gym-style environment: ``reset(seed) -> obs``, ``step(a) -> (obs, r, done, info)``."""

    observation_low = OBS_LOW
    observation_high = OBS_HIGH
    action_dim = 3
    observation_dim = len(OBS_NAMES)

    def __init__(self, config=None, params=None, aero=None, limits=DEFAULT_LIMITS, record=False):
        self.config = config or EnvConfig()
        self.params = params or VehicleParams()
        self.aero = aero or default_aero_dataset()
        self.limits = limits
        self.record = record
        self.rng = np.random.default_rng()
        self.x = None
        self.done = True

    def reset(self, seed=None, state=None, targets=None):
        """Start an episode; sample from the init bounds unless ``state`` is given."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        b = self.config.bounds
        if state is None:
            x = np.zeros(len(STATE_NAMES))
            for name in ("V", "alpha", "beta", "p", "q", "r", "mu", "gamma"):
                lo, hi = getattr(b, name)
                x[IDX[name]] = self.rng.uniform(lo, hi)
        else:
            x = np.array(state.as_array() if hasattr(state, "as_array") else state, dtype=float)
        if targets is None:
            targets = (self.rng.uniform(*b.alpha_d), 0.0, 0.0)
        self.x = x
        self.targets = np.asarray(targets, dtype=float)
        self.steps = 0
        self.done = False
        self.reason = None
        self.sigma = state_potential(x, self.targets[0], self.config.reward)
        self.sigma0 = self.sigma
        self.trace = []
        return make_observation(self.x, self.targets)

    def step(self, action, body_accel=None):
        if self.done:
            raise EnvUsageError("episode finished; call reset() before step()")
        cfg = self.config.reward
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        surfaces = scale_action(a, self.limits)
        detail = ""
        try:
            x_next = advance(self.x, surfaces, self.config.eta, self.config.dt, self.params,
                             self.aero, self.limits, body_accel)  # fmt: skip
            self.steps += 1
            done, reason, detail = check_termination(x_next, self.steps, self.config)
        except DomainError:
            x_next, done, reason, detail = self.x, True, ENVELOPE_EXIT, "alpha"
            self.steps += 1
        except (SingularityError, FlightDynamicsError) as exc:
            x_next, done, reason, detail = self.x, True, SINGULARITY, str(exc)
            self.steps += 1

        p, q, r = x_next[3], x_next[4], x_next[5]
        omega_sq = p * p + q * q + r * r
        e = tracking_errors(x_next[[1, 2, 6]], self.targets)
        r1 = phase1_reward(p, q, r, cfg)
        r2 = phase2_reward(e[0], q, p, r, cfg)
        eps = blend(math.sqrt(omega_sq), cfg)
        r_raw = (1.0 - eps) * r1 + eps * r2
        bonus = (cfg.bonus_alpha * (abs(e[0]) < cfg.bonus_tol)
                 + cfg.bonus_beta * (abs(e[1]) < cfg.bonus_tol)
                 + cfg.bonus_mu * (abs(e[2]) < cfg.bonus_tol))  # fmt: skip
        act_pen = cfg.action_penalty * float(a @ a)
        sigma_next = potential(e[0], omega_sq, cfg)
        pbrs = cfg.discount * sigma_next - self.sigma
        terminal = cfg.terminal_penalty if reason in PENALISED_REASONS else 0.0
        reward = r_raw + bonus - act_pen + pbrs + terminal

        self.x = x_next
        self.sigma = sigma_next
        self.done = done
        self.reason = reason
        info = {
            "reason": reason,
            "detail": detail,
            "r_phase1": r1,
            "r_phase2": r2,
            "blend": eps,
            "bonus": bonus,
            "action_penalty": act_pen,
            "pbrs": pbrs,
            "terminal": terminal,
            "surfaces": surfaces,
            "potential": sigma_next,
            "errors": e,
        }
        if self.record:
            self.trace.append(
                [self.steps * self.config.dt, *x_next, *self.targets, *a, *surfaces, r1, r2, eps,
                 bonus, act_pen, pbrs, terminal, reward, reason or ""]  # fmt: skip
            )
        return make_observation(x_next, self.targets), reward, done, info

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            w.writerows(self.trace)
