import json
import os

import numpy as np
import pytest

from sacnf.cli import main as cli_main
from sacnf.config import (
    ConfigError,
    ExperimentConfig,
    config_echo,
    config_to_text,
    load_config,
    parse_config_text,
)
from sacnf.engine import CriticPair, RngBundle, build_agent
from sacnf.envs import make_env
from sacnf.policy import make_policy
from sacnf.runner import (
    CheckpointError,
    agent_groups,
    load_agent,
    load_checkpoint,
    read_metrics,
    restore_groups,
    run_experiment,
    save_agent,
    save_checkpoint,
    write_metrics,
)

CFG_TEXT = """\
# tiny smoke experiment
env = sparse
flow_family = radial
n_flows = 2
policy_hidden = 4
critic_hidden = 8
batch_size = 16
warmup_steps = 30
total_env_steps = 120
eval_every = 60
eval_episodes = 2
analysis_rollouts = 10
analysis_states = 5
analysis_actions = 60
seeds = 0,1
out_dir = {out_dir}
"""


def write_cfg(tmp_path, **extra):
    text = CFG_TEXT.format(out_dir=tmp_path / "runs")
    for k, v in extra.items():
        text += f"{k} = {v}\n"
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    return p


# -- config ---------------------------------------------------------------


def test_config_parse_roundtrip(tmp_path):
    p = write_cfg(tmp_path)
    cfg = load_config(p)
    assert cfg.env == "sparse"
    assert cfg.n_flows == 2
    assert cfg.seeds == (0, 1)
    assert cfg.raw_text == p.read_text()
    # canonical text parses back to an equal config
    cfg2 = parse_config_text(config_to_text(cfg))
    assert cfg2 == cfg


def test_config_unknown_key_named():
    with pytest.raises(ConfigError) as ei:
        parse_config_text("env = sparse\nlearning_rate = 1\n")
    assert ei.value.field == "learning_rate"


def test_config_bad_value_named():
    with pytest.raises(ConfigError) as ei:
        parse_config_text("env = sparse\ngamma = fast\n")
    assert ei.value.field == "gamma"


def test_config_duplicate_key():
    with pytest.raises(ConfigError):
        parse_config_text("env = sparse\nenv = sparse\n")


def test_config_missing_env():
    with pytest.raises(ConfigError) as ei:
        parse_config_text("gamma = 0.9\n")
    assert ei.value.field == "env"


def test_config_invariants_checked():
    with pytest.raises(ConfigError):
        ExperimentConfig(env="sparse", gamma=1.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(env="sparse", n_flows=-1).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(env="sparse", lr_theta=0.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(env="nope").validate()


def test_config_stop_eval_return_none():
    cfg = parse_config_text("env = sparse\nstop_eval_return = none\n")
    assert cfg.stop_eval_return is None
    cfg = parse_config_text("env = sparse\nstop_eval_return = 12.5\n")
    assert cfg.stop_eval_return == 12.5


# -- metrics CSV -----------------------------------------------------------


def test_metrics_empty_log_header_only(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics([], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("env_step,episode,train_return")


def test_metrics_row_count(tmp_path):
    from sacnf.engine import MetricRow

    rows = [MetricRow(i, 0, 1.0, float("nan"), 0.0, 0.1, 0.2, -0.3, 1.5)
            for i in range(3)]
    path = tmp_path / "m.csv"
    write_metrics(rows, path)
    assert len(path.read_text().splitlines()) == 4


def test_metrics_reserialization_byte_identical(tmp_path):
    from sacnf.engine import MetricRow

    rows = [MetricRow(1, 2, 1.0 / 3.0, float("nan"), 1e-17, -0.125,
                      3.141592653589793, -1e300, 0.1)]
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    write_metrics(rows, p1)
    write_metrics(read_metrics(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    groups = {"a": rng.normal(size=17), "b.c[0]": rng.normal(size=(3, 2))}
    path = tmp_path / "ck.json"
    save_checkpoint(path, groups, meta={"note": 1})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": 1}
    for name in groups:
        assert np.array_equal(loaded[name], groups[name])
        assert loaded[name].tobytes() == np.ascontiguousarray(groups[name]).tobytes()


def test_checkpoint_corrupted_file(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_guard(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text(json.dumps({"format_version": 99, "groups": {}}))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_agent_checkpoint_roundtrip(tmp_path):
    cfg = ExperimentConfig(env="four_goal", policy_hidden=(4,), critic_hidden=(8,),
                           n_flows=2).validate()
    env = make_env(cfg.env)
    rngs = RngBundle(3)
    policy, critics = build_agent(cfg, env, rngs.init)
    path = tmp_path / "agent.json"
    save_agent(path, policy, critics, cfg, env_step=42, seed=3)
    policy2, critics2, meta = load_agent(path)
    assert meta["env_step"] == 42
    for name, arr in agent_groups(policy, critics).items():
        assert np.array_equal(agent_groups(policy2, critics2)[name], arr)
    s = np.random.default_rng(0).normal(size=(4, 2))
    assert np.array_equal(policy.deterministic_np(s), policy2.deterministic_np(s))


def test_restore_flow_count_mismatch(tmp_path):
    cfg = ExperimentConfig(env="four_goal", policy_hidden=(4,), critic_hidden=(8,),
                           n_flows=0, flow_family="none").validate()
    env = make_env(cfg.env)
    policy, critics = build_agent(cfg, env, np.random.default_rng(0))
    path = tmp_path / "agent.json"
    save_agent(path, policy, critics, cfg)
    groups, _ = load_checkpoint(path)
    target_policy = make_policy(2, 2, (4,), "average", "radial", 3)
    target_critics = CriticPair(2, 2, (8,))
    before = {k: v.copy() for k, v in agent_groups(target_policy, target_critics).items()}
    with pytest.raises(CheckpointError, match="flow"):
        restore_groups(groups, target_policy, target_critics)
    # nothing partially applied
    for k, v in agent_groups(target_policy, target_critics).items():
        assert np.array_equal(v, before[k])


# -- run_experiment ---------------------------------------------------------


def test_run_zero_steps_header_only(tmp_path):
    cfg = ExperimentConfig(env="sparse", total_env_steps=0, policy_hidden=(4,),
                           critic_hidden=(8,), analysis_rollouts=0,
                           analysis_states=0, seeds=(0,),
                           out_dir=str(tmp_path / "runs")).validate()
    arts = run_experiment(cfg)
    assert len(arts) == 1
    assert not arts[0].failed
    lines = open(arts[0].metrics_path).read().splitlines()
    assert len(lines) == 1


def test_run_experiment_artifacts_and_determinism(tmp_path):
    p = write_cfg(tmp_path)
    cfg = load_config(p)
    arts = run_experiment(cfg)
    assert [a.seed for a in arts] == [0, 1]
    for a in arts:
        assert os.path.exists(a.metrics_path)
        assert os.path.exists(a.analysis_path)
        assert os.path.exists(a.trajectories_path)
        assert a.checkpoint_paths and os.path.exists(a.checkpoint_paths[-1])
        # config echo is byte-identical to the input
        assert open(a.config_path).read() == p.read_text()
    analysis = json.load(open(arts[0].analysis_path))
    assert analysis["param_count"] > 0
    assert "shape_kl" in analysis

    # identical second execution is byte-identical
    first = open(arts[0].metrics_path, "rb").read()
    cfg2 = load_config(p)
    import dataclasses

    cfg2 = dataclasses.replace(cfg2, out_dir=str(tmp_path / "runs2"))
    arts2 = run_experiment(cfg2)
    assert open(arts2[0].metrics_path, "rb").read() == first
    ck1 = json.load(open(arts[0].checkpoint_paths[-1]))
    ck2 = json.load(open(arts2[0].checkpoint_paths[-1]))
    assert ck1["groups"] == ck2["groups"]


def test_run_experiment_failure_marker(tmp_path):
    cfg = ExperimentConfig(env="sparse", policy_hidden=(4,), critic_hidden=(8,),
                           batch_size=8, warmup_steps=10, total_env_steps=60,
                           lr_v=1e9,  # absurd rate forces divergence
                           analysis_rollouts=0, analysis_states=0,
                           seeds=(0,), out_dir=str(tmp_path / "runs")).validate()
    arts = run_experiment(cfg)
    assert arts[0].failed
    marker = json.load(open(arts[0].failure_path))
    assert marker["error"] == "TrainingDiverged"
    assert os.path.exists(arts[0].metrics_path)


# -- CLI ----------------------------------------------------------------------


def test_cli_reward_field(tmp_path, capsys):
    out = tmp_path / "field.csv"
    rc = cli_main(["reward-field", "deceptive", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x,y,r"
    assert len(lines) == 1 + 121 * 121


def test_cli_unknown_env_is_machine_readable(tmp_path, capsys):
    rc = cli_main(["reward-field", "atari", str(tmp_path / "x.csv")])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigurationError"


def test_cli_train_eval_analyze_pipeline(tmp_path, capsys):
    p = write_cfg(tmp_path, stop_eval_return="none")
    rc = cli_main(["train", str(p)])
    assert rc == 0
    out_lines = capsys.readouterr().out.strip().splitlines()
    assert len(out_lines) == 2
    ck = str(tmp_path / "runs" / "seed0" / "checkpoint_final.json")

    rc = cli_main(["eval", ck, "sparse", "--episodes", "3"])
    assert rc == 0
    ev = json.loads(capsys.readouterr().out.strip())
    assert ev["mode"] == "deterministic"
    assert len(ev["returns"]) == 3

    out_json = tmp_path / "analysis.json"
    rc = cli_main(["analyze", ck, "sparse", "--out", str(out_json)])
    assert rc == 0
    doc = json.loads(out_json.read_text())
    assert doc["param_count"] > 0


def test_cli_eval_missing_checkpoint(tmp_path, capsys):
    rc = cli_main(["eval", str(tmp_path / "none.json"), "sparse"])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "CheckpointError"
