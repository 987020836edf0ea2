"""Proximal policy optimisation in plain numpy.

Actor and critic are separate tanh MLPs over the same affinely normalised
observation. The actor outputs Gaussian means; log standard deviations are
free parameters independent of the state. Gradients are backpropagated by
hand and checked against finite differences in the test suite.
"""

import csv
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

FORMAT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


class LearnerError(RuntimeError):
    """Non-finite parameters or losses."""


class WeightFileError(ValueError):
    """Weight file unreadable, truncated, or incompatible."""


# ---------------------------------------------------------------- network


def _mlp_shapes(n_in, hidden, n_out):
    sizes = (n_in,) + tuple(hidden) + (n_out,)
    return list(zip(sizes[:-1], sizes[1:]))


class PolicyNetwork:
    """Actor-critic pair with fixed observation normalisation.

    Parameters live in ``self.params`` (name -> float64 array): ``aW{i}``,
    ``ab{i}`` for the actor, ``cW{i}``, ``cb{i}`` for the critic and
    ``log_std``.
    """

    activation = "tanh"

    def __init__(self, obs_dim, act_dim, hidden=(256, 128), obs_low=None, obs_high=None,
                 seed=0, log_std_init=-0.5, actor_out_scale=0.01):  # fmt: skip
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.obs_low = np.full(obs_dim, -1.0) if obs_low is None else np.asarray(obs_low, float).copy()
        self.obs_high = np.full(obs_dim, 1.0) if obs_high is None else np.asarray(obs_high, float).copy()
        if np.any(self.obs_high <= self.obs_low):
            raise ValueError("observation ranges need high > low")
        rng = np.random.default_rng(seed)
        self.metadata = {}
        self.params = {}
        for tag, n_out, out_scale in (("a", act_dim, actor_out_scale), ("c", 1, 1.0)):
            shapes = _mlp_shapes(obs_dim, self.hidden, n_out)
            for i, (m, n) in enumerate(shapes):
                scale = out_scale if i == len(shapes) - 1 else 1.0
                self.params[f"{tag}W{i}"] = rng.standard_normal((m, n)) * scale / math.sqrt(m)
                self.params[f"{tag}b{i}"] = np.zeros(n)
        self.params["log_std"] = np.full(act_dim, float(log_std_init))

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def normalize(self, obs):
        obs = np.asarray(obs, dtype=float)
        return 2.0 * (obs - self.obs_low) / (self.obs_high - self.obs_low) - 1.0

    def check_finite(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise LearnerError(f"non-finite parameter {k}")

    def _mlp(self, tag, z):
        acts = [z]
        for i in range(self.n_layers):
            z = z @ self.params[f"{tag}W{i}"] + self.params[f"{tag}b{i}"]
            if i < self.n_layers - 1:
                z = np.tanh(z)
            acts.append(z)
        return z, acts

    def forward(self, obs, cache=False):
        """Batch forward on raw observations: ``(mean, log_std, value)``."""
        x = self.normalize(np.atleast_2d(obs))
        mean, a_acts = self._mlp("a", x)
        value, c_acts = self._mlp("c", x)
        out = (mean, np.broadcast_to(self.params["log_std"], mean.shape), value[:, 0])
        if cache:
            return out, (a_acts, c_acts)
        return out

    def _backprop(self, tag, acts, grad_out, grads):
        g = grad_out
        for i in reversed(range(self.n_layers)):
            grads[f"{tag}W{i}"] = acts[i].T @ g
            grads[f"{tag}b{i}"] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[f"{tag}W{i}"].T) * (1.0 - acts[i] ** 2)

    def copy(self):
        other = object.__new__(PolicyNetwork)
        other.__dict__.update(self.__dict__)
        other.obs_low = self.obs_low.copy()
        other.obs_high = self.obs_high.copy()
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def act(self, obs, deterministic=True, rng=None):
        """Single-observation action in [-1, 1] (mean action when deterministic)."""
        mean, log_std, _ = self.forward(obs)
        a = mean[0]
        if not deterministic:
            a = a + np.exp(log_std[0]) * rng.standard_normal(self.act_dim)
        return np.clip(a, -1.0, 1.0)


def policy_forward(obs, network):
    """``(mean, log_std, value)`` for one observation; fault on non-finite output."""
    network.check_finite()
    mean, log_std, value = network.forward(obs)
    return mean[0], log_std[0].copy(), float(value[0])


def gaussian_log_prob(actions, mean, log_std):
    """Diagonal Gaussian log density, summed over action components."""
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))


def probability_ratio(logp_new, logp_old):
    return np.exp(np.asarray(logp_new) - np.asarray(logp_old))


def clipped_objective(ratio, advantages, clip):
    """Batch mean of ``min(r A, clip(r, 1 - clip, 1 + clip) A)``."""
    r = np.asarray(ratio, dtype=float)
    A = np.asarray(advantages, dtype=float)
    return float(np.mean(np.minimum(r * A, np.clip(r, 1.0 - clip, 1.0 + clip) * A)))


# ---------------------------------------------------------------- loss


@dataclass
class LossInfo:
    total: float
    policy: float
    value: float
    entropy: float
    clip_fraction: float


def ppo_loss_and_grads(network, obs, actions, logp_old, advantages, returns, clip,
                       vf_coef=0.5, ent_coef=0.0):  # fmt: skip
    """Loss to minimise and its gradient with respect to every parameter.

    loss = -clipped_objective + vf_coef * 0.5 * mean((V - R)^2) - ent_coef * entropy
    """
    (mean, log_std, value), (a_acts, c_acts) = network.forward(obs, cache=True)
    n = len(obs)
    ls = network.params["log_std"]
    inv_var = np.exp(-2.0 * ls)
    diff = actions - mean
    logp = gaussian_log_prob(actions, mean, ls)
    ratio = np.exp(logp - logp_old)
    lo, hi = 1.0 - clip, 1.0 + clip
    unclipped = ratio * advantages
    clipped = np.clip(ratio, lo, hi) * advantages
    surrogate = np.minimum(unclipped, clipped)
    # gradient flows only where the unclipped branch is the active minimum
    active = unclipped <= clipped
    d_logp = -(active * advantages * ratio) / n

    grads = {}
    d_mean = d_logp[:, None] * diff * inv_var
    network._backprop("a", a_acts, d_mean, grads)
    grads["log_std"] = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - ent_coef

    err = value - returns
    d_value = (vf_coef * err / n)[:, None]
    network._backprop("c", c_acts, d_value, grads)

    entropy = gaussian_entropy(ls)
    policy_loss = -float(np.mean(surrogate))
    value_loss = 0.5 * float(np.mean(err * err))
    total = policy_loss + vf_coef * value_loss - ent_coef * entropy
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    return LossInfo(total, policy_loss, value_loss, entropy, clip_frac), grads


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    dones: np.ndarray
    terminals: np.ndarray = None

    def __post_init__(self):
        if self.terminals is None:
            self.terminals = self.dones.copy()
        n = len(self.rewards)
        for name in ("obs", "actions", "logp", "values", "next_values", "dones", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"buffer field {name} has length {len(getattr(self, name))}, expected {n}")


def compute_advantages(buffer, gamma, lam):
    """GAE(gamma, lam). Returns ``(advantages, returns)``.

    ``dones`` cut the recursion; ``terminals`` (true ends, not time limits)
    additionally drop the bootstrap value.
    """
    r = buffer.rewards
    n = len(r)
    adv = np.zeros(n)
    nonterminal = 1.0 - buffer.terminals.astype(float)
    cont = 1.0 - buffer.dones.astype(float)
    last = 0.0
    for t in reversed(range(n)):
        delta = r[t] + gamma * buffer.next_values[t] * nonterminal[t] - buffer.values[t]
        last = delta + gamma * lam * cont[t] * last
        adv[t] = last
    return adv, adv + buffer.values


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    lr: float = 5e-5
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 10
    minibatch: int = 256
    rollout: int = 4096
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_timesteps: int = 2_000_000
    seed: int = 0
    reward_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


METRIC_COLUMNS = ("iteration", "timesteps", "mean_return", "episodes", "policy_loss",
                  "value_loss", "entropy", "clip_fraction", "first_epoch_ratio")  # fmt: skip


def collect_rollout(env, network, n_steps, rng, state, reward_scale=1.0):
    """Run the stochastic policy for ``n_steps``; ``state`` carries obs and episode sums.

    Buffered rewards are multiplied by ``reward_scale``; episode sums are not.
    """
    obs_buf = np.empty((n_steps, network.obs_dim))
    act_buf = np.empty((n_steps, network.act_dim))
    logp_buf = np.empty(n_steps)
    rew = np.empty(n_steps)
    val = np.empty(n_steps)
    next_val = np.empty(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    terms = np.zeros(n_steps, dtype=bool)
    finished = []
    obs = state["obs"]
    mean, log_std, v = network.forward(obs)
    for t in range(n_steps):
        std = np.exp(log_std[0])
        a = mean[0] + std * rng.standard_normal(network.act_dim)
        obs_buf[t] = obs
        act_buf[t] = a
        logp_buf[t] = gaussian_log_prob(a, mean[0], log_std[0])
        val[t] = v[0]
        obs, r, done, info = env.step(np.clip(a, -1.0, 1.0))
        rew[t] = r * reward_scale
        state["ret"] += r
        mean, log_std, v = network.forward(obs)
        next_val[t] = v[0]
        if done:
            dones[t] = True
            terms[t] = info.get("reason") != "step_limit"
            finished.append(state["ret"])
            state["ret"] = 0.0
            obs = env.reset(seed=int(rng.integers(2**31)))
            mean, log_std, v = network.forward(obs)
    state["obs"] = obs
    buf = RolloutBuffer(obs_buf, act_buf, logp_buf, rew, val, next_val, dones, terms)
    return buf, finished


def train(env_factory, config, network, metrics_path=None, log=None, snapshot_path=None):
    """On-policy PPO loop. Returns ``(network, metrics)``.

    ``env_factory(seed)`` builds an environment exposing ``reset(seed)`` and
    ``step(action) -> (obs, reward, done, info)``. All randomness derives
    from ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    env = env_factory(int(rng.integers(2**31)))
    opt = Adam(network.params, config.lr)
    state = {"obs": env.reset(seed=int(rng.integers(2**31))), "ret": 0.0}
    metrics = []
    fh = None
    writer = None
    if metrics_path:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
    steps = 0
    it = 0
    recent = []
    try:
        while steps < config.total_timesteps:
            n = min(config.rollout, config.total_timesteps - steps)
            buf, finished = collect_rollout(env, network, n, rng, state, config.reward_scale)
            steps += n
            it += 1
            adv, ret = compute_advantages(buf, config.gamma, config.lam)
            # re-evaluate old log-probs batched so epoch-0 ratios are exactly 1
            mean, ls, _ = network.forward(buf.obs)
            buf.logp = gaussian_log_prob(buf.actions, mean, ls[0])
            first_ratio = None
            infos = []
            for epoch in range(config.epochs):
                order = rng.permutation(n)
                for s in range(0, n, config.minibatch):
                    idx = order[s : s + config.minibatch]
                    a = adv[idx]
                    if len(idx) > 1:
                        a = (a - a.mean()) / (a.std() + 1e-8)
                    if epoch == 0 and first_ratio is None:
                        mean, ls, _ = network.forward(buf.obs[idx])
                        first_ratio = float(np.max(np.abs(
                            probability_ratio(gaussian_log_prob(buf.actions[idx], mean, ls[0]),
                                              buf.logp[idx]) - 1.0)))  # fmt: skip
                    info, grads = ppo_loss_and_grads(network, buf.obs[idx], buf.actions[idx],
                                                     buf.logp[idx], a, ret[idx], config.clip,
                                                     config.vf_coef, config.ent_coef)  # fmt: skip
                    if not math.isfinite(info.total):
                        if snapshot_path:
                            save_weights(network, snapshot_path)
                        raise LearnerError(
                            f"non-finite loss at iteration {it} (policy={info.policy}, "
                            f"value={info.value}); snapshot={snapshot_path}"
                        )
                    clip_grad_norm(grads, config.max_grad_norm)
                    opt.step(network.params, grads)
                    infos.append(info)
            recent.extend(finished)
            mean_ret = float(np.mean(finished)) if finished else float("nan")
            row = {
                "iteration": it,
                "timesteps": steps,
                "mean_return": mean_ret,
                "episodes": len(finished),
                "policy_loss": float(np.mean([i.policy for i in infos])),
                "value_loss": float(np.mean([i.value for i in infos])),
                "entropy": infos[-1].entropy,
                "clip_fraction": float(np.mean([i.clip_fraction for i in infos])),
                "first_epoch_ratio": first_ratio,
            }
            metrics.append(row)
            if writer:
                writer.writerow([row[c] for c in METRIC_COLUMNS])
                fh.flush()
            if log:
                log(row)
    finally:
        if fh:
            fh.close()
    return network, metrics


# ---------------------------------------------------------------- persistence


def _header(network, metadata=None):
    return {
        "metadata": metadata or {},
        "format": "hybridflight-policy",
        "version": FORMAT_VERSION,
        "obs_dim": network.obs_dim,
        "act_dim": network.act_dim,
        "hidden": list(network.hidden),
        "activation": network.activation,
        "shapes": {k: list(v.shape) for k, v in network.params.items()},
    }


def save_weights(network, path, metadata=None):
    """Write an ``.npz`` archive: parameters, normalisation ranges, JSON header.

    ``metadata`` (JSON-serialisable) is stored in the header, e.g. the
    training configuration and timesteps.
    """
    arrays = {f"param/{k}": v for k, v in network.params.items()}
    arrays["obs_low"] = network.obs_low
    arrays["obs_high"] = network.obs_high
    arrays["header"] = np.frombuffer(json.dumps(_header(network, metadata)).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path, expected_hidden=None):
    """Load a network saved by :func:`save_weights`.

    Raises WeightFileError on truncation, version or shape mismatch; no
    partially built network is ever returned.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
        with np.load(io.BytesIO(raw), allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    if "header" not in arrays:
        raise WeightFileError("weight file has no header")
    try:
        header = json.loads(arrays["header"].tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"corrupt header: {exc}") from exc
    if header.get("format") != "hybridflight-policy" or header.get("version") != FORMAT_VERSION:
        raise WeightFileError(f"unsupported weight format {header.get('format')!r} v{header.get('version')!r}")
    if header.get("activation") != PolicyNetwork.activation:
        raise WeightFileError(f"unsupported activation {header.get('activation')!r}")
    hidden = tuple(header["hidden"])
    if expected_hidden is not None and hidden != tuple(expected_hidden):
        raise WeightFileError(f"shape mismatch: file has hidden sizes {hidden}, expected {tuple(expected_hidden)}")
    net = PolicyNetwork(header["obs_dim"], header["act_dim"], hidden,
                        arrays["obs_low"], arrays["obs_high"])  # fmt: skip
    for k, v in net.params.items():
        stored = arrays.get(f"param/{k}")
        if stored is None or stored.shape != v.shape or list(stored.shape) != header["shapes"].get(k):
            raise WeightFileError(f"shape mismatch for parameter {k}")
        net.params[k] = stored.astype(float)
    net.check_finite()
    net.metadata = header.get("metadata", {})
    return net


# ---------------------------------------------------------------- toy task


class DoubleIntegratorEnv:
    """1-D double integrator: drive position and velocity to zero.

    Reward ``-(x^2 + 0.1 v^2 + 0.01 u^2)`` per step, fixed 200-step episodes.
    """

    obs_low = np.array([-2.0, -2.0])
    obs_high = np.array([2.0, 2.0])
    observation_dim = 2
    action_dim = 1

    def __init__(self, dt=0.05, horizon=200, force=1.0):
        self.dt = dt
        self.horizon = horizon
        self.force = force
        self.rng = np.random.default_rng()

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.s = self.rng.uniform(-1.0, 1.0, 2)
        self.t = 0
        return self.s.copy()

    def step(self, action):
        u = float(np.clip(np.asarray(action).ravel()[0], -1.0, 1.0)) * self.force
        x, v = self.s
        v = v + u * self.dt
        x = x + v * self.dt
        self.s = np.clip(np.array([x, v]), -2.0, 2.0)
        self.t += 1
        r = -(x * x + 0.1 * v * v + 0.01 * u * u)
        done = self.t >= self.horizon
        return self.s.copy(), r, done, {"reason": "step_limit" if done else None}


def config_to_dict(config):
    return asdict(config)
