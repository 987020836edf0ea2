"""Command-line entry point: ``hybridflight <subcommand> ...``.

Subcommands:
    simulate         run one scenario, write trajectory CSV and metrics JSON
    train            PPO training, write policy weights and metrics CSV
    compare          run scenarios on shared initial conditions, write a table
    calibrate-delta  Monte-Carlo sweep of the feedforward mismatch bound
    phase-plane      export (y, y_dot) pairs from a trajectory or a scenario
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("hybridflight")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(args, path=None):
    from .harness import ScenarioConfig

    cfg = ScenarioConfig.from_json(path or args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "controller", None):
        overrides["controller"] = args.controller
    if getattr(args, "policy", None):
        overrides["policy_path"] = args.policy
    return cfg.replace(**overrides) if overrides else cfg


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def cmd_simulate(args):
    from .harness import run_scenario

    cfg = _scenario(args)
    out = _out_dir(args)
    result = run_scenario(cfg, csv_path=out / f"{cfg.name}_trajectory.csv")
    summary = {"scenario": cfg.to_dict(), "reason": result.reason, "metrics": result.metrics.to_dict()}
    _dump(out / f"{cfg.name}_metrics.json", summary)
    print(json.dumps(summary["metrics"], default=_json_default))
    return 0


def _train_setup(cfg):
    from .env import OBS_HIGH, OBS_LOW, EnvConfig, SpinRecoveryEnv
    from .learner import DoubleIntegratorEnv, PolicyNetwork, PpoConfig

    ppo = PpoConfig(**cfg.get("ppo", {}))
    hidden = tuple(cfg.get("hidden", (256, 128)))
    task = cfg.get("task", "flight")
    if task == "flight":
        env_cfg = EnvConfig.from_dict(cfg.get("env", {}))
        net = PolicyNetwork(len(OBS_LOW), 3, hidden, OBS_LOW, OBS_HIGH, seed=ppo.seed)

        def factory(seed):
            return SpinRecoveryEnv(env_cfg)

    elif task == "double_integrator":
        net = PolicyNetwork(2, 1, hidden, DoubleIntegratorEnv.obs_low, DoubleIntegratorEnv.obs_high, seed=ppo.seed)

        def factory(seed):
            return DoubleIntegratorEnv()

    else:
        raise SystemExit(f"unknown training task {task!r}")
    return ppo, net, factory


def cmd_train(args):
    from dataclasses import asdict, replace

    from .learner import save_weights, train

    with open(args.config) as fh:
        cfg = json.load(fh)
    ppo, net, factory = _train_setup(cfg)
    if args.seed is not None:
        ppo = replace(ppo, seed=args.seed)
        cfg.setdefault("ppo", {})["seed"] = args.seed
    if args.timesteps is not None:
        ppo = replace(ppo, total_timesteps=args.timesteps)
    out = _out_dir(args)

    def report(row):
        log.info("iter %d  steps %d  mean_return %.2f", row["iteration"], row["timesteps"], row["mean_return"])

    net, metrics = train(factory, ppo, net, metrics_path=out / "train_metrics.csv", log=report,
                         snapshot_path=out / "policy_fault_snapshot.npz")  # fmt: skip
    meta = {"task": cfg.get("task", "flight"), "trained_timesteps": ppo.total_timesteps,
            "ppo": asdict(ppo), "env": cfg.get("env", {})}  # fmt: skip
    save_weights(net, out / "policy.npz", metadata=meta)
    print(f"wrote {out / 'policy.npz'} after {ppo.total_timesteps} steps")
    return 0


def cmd_compare(args):
    from .harness import compare_controllers, run_scenario

    configs = []
    for path in args.config:
        base = _scenario(args, path)
        kinds = args.controllers.split(",") if args.controllers else [base.controller]
        for kind in kinds:
            configs.append(base.replace(controller=kind, name=f"{base.name}_{kind}"))
    out = _out_dir(args)
    results = [run_scenario(c, csv_path=out / f"{c.name}_trajectory.csv") for c in configs]
    table = compare_controllers(results)
    _dump(out / "comparison.json", table)
    for row in table:
        print(f"{row['name']:<28} settle={row['settling_time']} TV={np.round(row['total_variation'], 3).tolist()} "
              f"reason={row['reason']}")  # fmt: skip
    return 0


def cmd_calibrate(args):
    from .env import InitBounds, make_observation, scale_action
    from .flightdyn import IDX, STATE_NAMES
    from .harness import _load_model, _load_policy
    from .hybrid import HybridConfig, calibrate_mismatch_bound, safety_filter
    from .smc import References, SmcGains

    cfg = _scenario(args)
    params, aero, eta = _load_model(cfg)
    net = _load_policy(cfg, None)
    hcfg = HybridConfig.from_dict(cfg.hybrid)
    gains = SmcGains.from_dict(cfg.gains)
    bounds = InitBounds(**{k: tuple(v) for k, v in cfg.bounds.items()})
    rng = np.random.default_rng(cfg.seed)

    def samples():
        for _ in range(args.samples):
            x = np.zeros(len(STATE_NAMES))
            for name in ("V", "alpha", "beta", "p", "q", "r", "mu", "gamma"):
                x[IDX[name]] = rng.uniform(*getattr(bounds, name))
            yield x, References.setpoint(rng.uniform(*bounds.alpha_d))

    def policy(x, refs):
        u = scale_action(net.act(make_observation(x, refs.y)))
        return safety_filter(u, hcfg)[0]

    delta_bar, used = calibrate_mismatch_bound(samples(), policy, gains, params, aero, eta)
    out = _out_dir(args)
    summary = {"delta_bar": delta_bar.tolist(), "samples": used, "requested": args.samples}
    _dump(out / "delta_bar.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_phase_plane(args):
    from .harness import phase_plane_export, read_trajectory, run_scenario

    if args.trajectory:
        rows = read_trajectory(args.trajectory)
        stem = Path(args.trajectory).stem
    elif args.config:
        cfg = _scenario(args)
        rows = run_scenario(cfg).rows
        stem = cfg.name
    else:
        raise SystemExit("phase-plane needs --trajectory or --config")
    out = _out_dir(args)
    channels = ("alpha", "beta", "mu") if args.channel == "all" else (args.channel,)
    for ch in channels:
        pp = phase_plane_export(rows, ch, args.threshold)
        path = out / f"{stem}_phase_{ch}.csv"
        pp.write_csv(path)
        print(f"{path}: {len(pp.y)} points, {int(pp.high_rate.sum())} high-rate")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="hybridflight", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, multi=False):
        if multi:
            p.add_argument("--config", action="append", required=True, help="scenario JSON (repeatable)")
        else:
            p.add_argument("--config", required=config_required, help="config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")

    p = sub.add_parser("simulate", help="run one closed-loop scenario")
    common(p)
    p.add_argument("--controller", choices=("rl", "smc", "hybrid"), help="override controller kind")
    p.add_argument("--policy", help="override policy weight path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a PPO policy")
    common(p)
    p.add_argument("--timesteps", type=int, default=None, help="override total timesteps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="compare controllers on shared initial conditions")
    common(p, multi=True)
    p.add_argument("--controller", choices=("rl", "smc", "hybrid"), help="override controller kind")
    p.add_argument("--controllers", help="comma list of controller kinds to run per config")
    p.add_argument("--policy", help="override policy weight path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate-delta", help="Monte-Carlo feedforward mismatch bound")
    common(p)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--policy", help="override policy weight path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("phase-plane", help="export phase-plane pairs")
    common(p, config_required=False)
    p.add_argument("--trajectory", help="trajectory CSV written by simulate")
    p.add_argument("--channel", choices=("alpha", "beta", "mu", "all"), default="alpha")
    p.add_argument("--threshold", type=float, default=0.17, help="||omega|| tag threshold (rad/s)")
    p.add_argument("--controller", choices=("rl", "smc", "hybrid"), help="override controller kind")
    p.set_defaults(func=cmd_phase_plane)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")  # fmt: skip
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
