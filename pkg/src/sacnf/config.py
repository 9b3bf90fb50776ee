"""Experiment configuration: a strict, flat key-value text format.

Every run is described declaratively by one file.  Unknown keys are errors
(silent hyperparameter typos are worse than strictness), values are typed
through a fixed schema, and the raw text is kept so run directories can echo
the input byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from sacnf.autodiff import ConfigurationError
from sacnf.envs import env_names
from sacnf.policy import NOISE_MODELS


class ConfigError(ConfigurationError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(p) for p in s.split(","))


def _parse_opt_float(s: str):
    return None if s.lower() == "none" else float(s)


@dataclass
class ExperimentConfig:
    env: str
    flow_family: str = "radial"  # radial | planar | none
    n_flows: int = 3
    noise_model: str = "average"  # conditional | average
    policy_hidden: tuple = (8,)
    critic_hidden: tuple = (32,)
    critic_activation: str = "relu"
    alpha_ent: float = 0.05
    gamma: float = 0.99
    tau: float = 0.005
    lr_theta: float = 3e-4
    lr_phi: float = 3e-4
    lr_v: float = 3e-4
    lr_q: float = 3e-4
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    total_env_steps: int = 10_000
    warmup_steps: int = 1000
    learn_every: int = 1
    eval_every: int = 1000
    eval_episodes: int = 10
    checkpoint_every: int = 0  # 0 = final checkpoint only
    stop_eval_return: float | None = None
    flow_init_scale: float = 0.01
    twin_q: bool = False
    analysis_rollouts: int = 200
    analysis_states: int = 100
    analysis_actions: int = 250
    seeds: tuple = (0,)
    workers: int = 1
    out_dir: str = "runs/experiment"
    raw_text: str | None = field(default=None, repr=False, compare=False)

    def validate(self) -> "ExperimentConfig":
        if self.env not in env_names():
            raise ConfigError("env", f"unknown env {self.env!r}")
        if self.flow_family not in ("radial", "planar", "none"):
            raise ConfigError("flow_family", f"unknown family {self.flow_family!r}")
        if self.noise_model not in NOISE_MODELS:
            raise ConfigError("noise_model", f"unknown model {self.noise_model!r}")
        if self.critic_activation not in ("tanh", "relu"):
            raise ConfigError("critic_activation", f"unknown tag {self.critic_activation!r}")
        if self.n_flows < 0:
            raise ConfigError("n_flows", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau", "must lie in [0, 1]")
        for name in ("lr_theta", "lr_phi", "lr_v", "lr_q"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(name, "must be > 0")
        for name in ("buffer_capacity", "learn_every", "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("total_env_steps", "warmup_steps", "checkpoint_every",
                     "analysis_rollouts", "analysis_states", "analysis_actions"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.alpha_ent < 0.0:
            raise ConfigError("alpha_ent", "must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        return self


_PARSERS = {
    str: lambda s: s,
    int: int,
    float: float,
    bool: _parse_bool,
    tuple: _parse_int_tuple,
}


def _schema():
    out = {}
    for f in fields(ExperimentConfig):
        if f.name == "raw_text":
            continue
        if f.name == "stop_eval_return":
            out[f.name] = _parse_opt_float
        elif f.name == "env":
            out[f.name] = str
        else:
            out[f.name] = _PARSERS[type(getattr(ExperimentConfig, f.name))]
    return out


def parse_config_text(text: str) -> ExperimentConfig:
    schema = _schema()
    values: dict = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in schema:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "duplicate key")
        try:
            values[key] = schema[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, f"cannot parse {value!r}: {exc}") from None
    if "env" not in values:
        raise ConfigError("env", "required key missing")
    cfg = ExperimentConfig(**values, raw_text=text)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical text form; parsing it back reproduces the config."""
    lines = []
    for f in fields(ExperimentConfig):
        if f.name == "raw_text":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_echo(cfg: ExperimentConfig) -> str:
    """The byte-exact input when parsed from text, else the canonical form."""
    return cfg.raw_text if cfg.raw_text is not None else config_to_text(cfg)
