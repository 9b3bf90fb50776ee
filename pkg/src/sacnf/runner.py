"""Experiment front end: seeded multi-run execution and artifact export.

Every seed gets its own directory under the config's out_dir:

    seed<k>/config.txt          byte-identical echo of the input config
    seed<k>/metrics.csv         one row per learning step / eval boundary
    seed<k>/trajectories.csv    stochastic rollout traces of the final policy
    seed<k>/analysis.json       shape diagnostics of the final policy
    seed<k>/checkpoint_*.json   bit-exact parameter snapshots
    seed<k>/FAILED.json         only present when the run aborted

Artifacts are a pure function of (config, seed); seeds may run concurrently
in worker processes since runs share nothing.
"""

from __future__ import annotations

import base64
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from sacnf.analysis import (
    gap_statistic,
    moments,
    select_num_modes,
    shape_kl,
    terminal_histogram,
)
from sacnf.config import ExperimentConfig, config_echo
from sacnf.engine import (
    CriticPair,
    MetricRow,
    RngBundle,
    TrainingDiverged,
    evaluate,
    rollout_stochastic,
    train,
)
from sacnf.envs import make_env, reward_field
from sacnf.policy import make_policy

CHECKPOINT_VERSION = 1
METRIC_FIELDS = (
    "env_step", "episode", "train_return", "eval_return_mean", "eval_return_std",
    "loss_q", "loss_v", "loss_pi", "policy_entropy_mc",
)


class CheckpointError(RuntimeError):
    pass


def fmt(x) -> str:
    """Canonical 17-significant-digit formatting (round-trips float64)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


# -- metrics CSV ----------------------------------------------------------------


def write_metrics(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRIC_FIELDS) + "\n")
        for row in rows:
            fh.write(",".join((
                str(row.env_step), str(row.episode), fmt(row.train_return),
                fmt(row.eval_return_mean), fmt(row.eval_return_std),
                fmt(row.loss_q), fmt(row.loss_v), fmt(row.loss_pi),
                fmt(row.policy_entropy_mc),
            )) + "\n")


def read_metrics(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != ",".join(METRIC_FIELDS):
            raise CheckpointError(f"unexpected metrics header in {path}")
        for line in fh:
            parts = line.strip().split(",")
            rows.append(MetricRow(int(parts[0]), int(parts[1]),
                                  *(float(p) for p in parts[2:])))
    return rows


# -- checkpoints -----------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"].encode("ascii"))
    arr = np.frombuffer(raw, dtype=np.dtype(payload["dtype"])).astype(np.float64)
    expected = int(np.prod(payload["shape"])) if payload["shape"] else 1
    if arr.size != expected:
        raise CheckpointError(f"array payload size {arr.size} != shape {payload['shape']}")
    return arr.reshape(payload["shape"])


def save_checkpoint(path, groups: dict, meta: dict | None = None) -> None:
    """Write named parameter groups; the round trip is bit-exact."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "groups": {name: _encode_array(arr) for name, arr in groups.items()},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read (groups, meta); any malformation raises before returning data."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('format_version')!r} != {CHECKPOINT_VERSION}"
        )
    try:
        groups = {name: _decode_array(p) for name, p in doc["groups"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None
    return groups, doc.get("meta", {})


def agent_groups(policy, critics: CriticPair) -> dict:
    return {**policy.param_groups(), **critics.param_groups()}


def restore_groups(groups: dict, policy, critics: CriticPair) -> None:
    """Copy checkpointed groups into an agent; all-or-nothing on mismatch."""
    targets = agent_groups(policy, critics)
    if set(groups) != set(targets):
        missing = set(targets) - set(groups)
        extra = set(groups) - set(targets)
        raise CheckpointError(
            f"group mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, arr in groups.items():
        if arr.reshape(-1).size != targets[name].size:
            raise CheckpointError(
                f"group {name!r} has {arr.size} values, agent expects {targets[name].size}"
            )
    for name, arr in groups.items():
        targets[name][:] = arr.reshape(-1)


def save_agent(path, policy, critics: CriticPair, cfg: ExperimentConfig,
               env_step: int = 0, seed: int | None = None) -> None:
    meta = {
        "policy": policy.describe(),
        "critic_hidden": list(cfg.critic_hidden),
        "critic_activation": cfg.critic_activation,
        "twin_q": cfg.twin_q,
        "env": cfg.env,
        "env_step": env_step,
        "seed": seed,
        "flow_init_scale": cfg.flow_init_scale,
    }
    save_checkpoint(path, agent_groups(policy, critics), meta)


def load_agent(path):
    """Rebuild (policy, critics, meta) from a self-describing checkpoint."""
    groups, meta = load_checkpoint(path)
    try:
        pd = meta["policy"]
        policy = make_policy(pd["state_dim"], pd["action_dim"], tuple(pd["hidden"]),
                             pd["noise_model"], pd["flow_family"], pd["n_flows"])
        critics = CriticPair(pd["state_dim"], pd["action_dim"],
                             tuple(meta["critic_hidden"]), twin_q=meta["twin_q"],
                             activation=meta.get("critic_activation", "relu"))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint meta incomplete: {exc}") from None
    restore_groups(groups, policy, critics)
    return policy, critics, meta


# -- analysis battery ----------------------------------------------------------


def analyze_policy(policy, env, cfg: ExperimentConfig, rng: np.random.Generator,
                   env_step: int = 0, run_id: str = "") -> dict:
    """Final-policy diagnostics: rollouts, occupancy, shape statistics."""
    returns = []
    terminals = []
    trajectories = []
    visited = []
    for k in range(cfg.analysis_rollouts):
        total, positions = rollout_stochastic(policy, env, rng)
        returns.append(total)
        terminals.append(positions[-1])
        trajectories.append(positions)
        visited.append(positions[:-1])
    terminals = np.array(terminals) if terminals else np.zeros((0, 2))
    visited = np.concatenate(visited, axis=0) if visited else np.zeros((0, 2))

    result = {
        "run_id": run_id,
        "env_step": env_step,
        "param_count": policy.count_params(),
        "analysis_rollouts": cfg.analysis_rollouts,
        "rollout_return_mean": float(np.mean(returns)) if returns else float("nan"),
    }
    if len(terminals):
        hist = terminal_histogram(terminals, bounds=(env.spec.room_low, env.spec.room_high),
                                  resolution=12)
        result["terminal_histogram"] = {
            "bounds": [env.spec.room_low, env.spec.room_high],
            "resolution": 12,
            "mass": hist.tolist(),
        }
        result["terminal_positions"] = terminals.tolist()

    if cfg.analysis_states > 0 and len(visited) >= cfg.analysis_states:
        idx = rng.choice(len(visited), size=cfg.analysis_states, replace=False)
        states = visited[idx]
        result["shape_kl"] = shape_kl(policy, states, cfg.analysis_actions, rng)

        pooled = []
        per_state_modes = []
        gap_states = states[: min(8, len(states))]
        for s in gap_states:
            tiled = np.tile(s[None, :], (cfg.analysis_actions, 1))
            actions = policy.sample_np(tiled, rng).action
            pooled.append(actions)
            gap = gap_statistic(actions, k_max=5, n_refs=10, rng=rng)
            per_state_modes.append(select_num_modes(gap))
        pooled = np.concatenate(pooled, axis=0)
        skew_kurt = [moments(pooled[:, j]) for j in range(pooled.shape[1])]
        result["skewness"] = [sk for sk, _ in skew_kurt]
        result["excess_kurtosis"] = [ek for _, ek in skew_kurt]
        result["modes_per_state"] = per_state_modes

    result["_trajectories"] = trajectories
    return result


def write_trajectories(trajectories, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rollout,t,x,y\n")
        for k, positions in enumerate(trajectories):
            for t, (x, y) in enumerate(positions):
                fh.write(f"{k},{t},{fmt(x)},{fmt(y)}\n")


def write_reward_field(env, path, resolution: int = 121) -> None:
    rows = reward_field(env, resolution)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,r\n")
        for x, y, r in rows:
            fh.write(f"{fmt(x)},{fmt(y)},{fmt(r)}\n")


# -- per-seed execution ---------------------------------------------------------


@dataclass
class RunArtifacts:
    seed: int
    run_dir: str
    config_path: str
    metrics_path: str
    trajectories_path: str
    analysis_path: str
    checkpoint_paths: list = field(default_factory=list)
    failed: bool = False
    failure_path: str | None = None


def run_single_seed(cfg: ExperimentConfig, seed: int) -> RunArtifacts:
    run_dir = os.path.join(cfg.out_dir, f"seed{seed}")
    os.makedirs(run_dir, exist_ok=True)
    art = RunArtifacts(
        seed=seed,
        run_dir=run_dir,
        config_path=os.path.join(run_dir, "config.txt"),
        metrics_path=os.path.join(run_dir, "metrics.csv"),
        trajectories_path=os.path.join(run_dir, "trajectories.csv"),
        analysis_path=os.path.join(run_dir, "analysis.json"),
    )
    with open(art.config_path, "w", encoding="utf-8") as fh:
        fh.write(config_echo(cfg))

    env = make_env(cfg.env)
    rngs = RngBundle(seed)

    def checkpoint_cb(step, policy, critics):
        path = os.path.join(run_dir, f"checkpoint_step{step}.json")
        save_agent(path, policy, critics, cfg, env_step=step, seed=seed)
        art.checkpoint_paths.append(path)

    try:
        log = train(cfg, env, rngs, checkpoint_cb=checkpoint_cb)
    except TrainingDiverged as exc:
        art.failed = True
        art.failure_path = os.path.join(run_dir, "FAILED.json")
        if exc.log is not None:
            write_metrics(exc.log.rows, art.metrics_path)
        with open(art.failure_path, "w", encoding="utf-8") as fh:
            json.dump({"error": "TrainingDiverged", "env_step": exc.env_step,
                       "losses": exc.losses}, fh, indent=2)
        return art

    write_metrics(log.rows, art.metrics_path)

    final_path = os.path.join(run_dir, "checkpoint_final.json")
    save_agent(final_path, log.policy, log.critics, cfg,
               env_step=log.env_steps, seed=seed)
    art.checkpoint_paths.append(final_path)

    run_id = f"{cfg.env}-seed{seed}"
    analysis = analyze_policy(log.policy, env, cfg, rngs.analysis,
                              env_step=log.env_steps, run_id=run_id)
    trajectories = analysis.pop("_trajectories")
    write_trajectories(trajectories, art.trajectories_path)
    final_eval = evaluate(log.policy, env, cfg.eval_episodes)
    analysis["eval_return_mean"] = final_eval.mean
    analysis["eval_return_std"] = final_eval.std
    analysis["stopped_early"] = log.stopped_early
    analysis["env_steps"] = log.env_steps
    with open(art.analysis_path, "w", encoding="utf-8") as fh:
        json.dump(analysis, fh, indent=2)
    return art


def run_experiment(cfg: ExperimentConfig) -> list[RunArtifacts]:
    """One run per configured seed, optionally across worker processes."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(run_single_seed, cfg, seed) for seed in cfg.seeds]
            return [f.result() for f in futures]
    return [run_single_seed(cfg, seed) for seed in cfg.seeds]
