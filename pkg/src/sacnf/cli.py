"""Command-line front end.

    sacnf train <config>
    sacnf eval <checkpoint> <env> [--episodes K] [--stochastic] [--seed S]
    sacnf analyze <checkpoint> <env> [--seed S] [--out PATH]
    sacnf reward-field <env> <out.csv>

Exit code 0 on success; on failure a single machine-readable JSON error line
goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from sacnf.autodiff import ConfigurationError, NumericError
from sacnf.config import load_config
from sacnf.engine import RngBundle, evaluate, rollout_stochastic
from sacnf.envs import make_env
from sacnf.runner import (
    CheckpointError,
    analyze_policy,
    load_agent,
    run_experiment,
    write_reward_field,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacnf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured experiment for every seed")
    p.add_argument("config", help="path to a flat key-value config file")

    p = sub.add_parser("eval", help="roll out a checkpointed policy")
    p.add_argument("checkpoint")
    p.add_argument("env")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--stochastic", action="store_true",
                   help="sample the policy instead of taking the noiseless action")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="shape diagnostics for a checkpointed policy")
    p.add_argument("checkpoint")
    p.add_argument("env")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")

    p = sub.add_parser("reward-field", help="export an env reward map as CSV")
    p.add_argument("env")
    p.add_argument("out_csv")
    p.add_argument("--resolution", type=int, default=121)
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    artifacts = run_experiment(cfg)
    failed = [a for a in artifacts if a.failed]
    for a in artifacts:
        status = "FAILED" if a.failed else "ok"
        print(json.dumps({"seed": a.seed, "status": status, "run_dir": a.run_dir}))
    return 1 if failed else 0


def _cmd_eval(args) -> int:
    policy, _, meta = load_agent(args.checkpoint)
    env = make_env(args.env)
    if args.stochastic:
        rng = RngBundle(args.seed).analysis
        returns = []
        for _ in range(args.episodes):
            total, _positions = rollout_stochastic(policy, env, rng)
            returns.append(total)
        returns = np.array(returns)
        out = {"mode": "stochastic", "mean": float(returns.mean()),
               "std": float(returns.std()), "returns": returns.tolist()}
    else:
        ev = evaluate(policy, env, args.episodes)
        out = {"mode": "deterministic", "mean": ev.mean, "std": ev.std,
               "returns": ev.returns.tolist(),
               "terminal_positions": ev.terminal_positions.tolist()}
    out["env"] = args.env
    out["checkpoint_env_step"] = meta.get("env_step")
    print(json.dumps(out))
    return 0


def _cmd_analyze(args) -> int:
    policy, _, meta = load_agent(args.checkpoint)
    env = make_env(args.env)
    from sacnf.config import ExperimentConfig

    cfg = ExperimentConfig(env=args.env).validate()
    rng = RngBundle(args.seed).analysis
    result = analyze_policy(policy, env, cfg, rng,
                            env_step=meta.get("env_step", 0),
                            run_id=f"analyze-{args.env}")
    result.pop("_trajectories", None)
    text = json.dumps(result, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_reward_field(args) -> int:
    env = make_env(args.env)
    write_reward_field(env, args.out_csv, resolution=args.resolution)
    print(json.dumps({"env": args.env, "out": args.out_csv,
                      "rows": args.resolution * args.resolution}))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "reward-field": _cmd_reward_field,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, CheckpointError, NumericError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
