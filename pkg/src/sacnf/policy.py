"""Stochastic policies: a diagonal Gaussian base, optionally pushed through flows.

Sampling follows the reparametrization path

    eps ~ N(0, I),   z = eps * sigma(s) + mu(s),   a = chain(z),

and the reported log-density is evaluated along that recorded path:

    log pi(a|s) = log N(eps; 0, I) - sum_k log sigma_k - sum_i log|det J_i|.

The noise embedding is either state-conditional (a log-scale head on the
shared trunk) or a single free log-scale vector shared across states.
Log-scales are clamped to [-5, 2] before exponentiation.

Density evaluation of externally supplied actions is deliberately not
offered; the losses only ever score freshly sampled actions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sacnf.autodiff import ConfigurationError, DenseNet, Graph, NumericError, Var
from sacnf.flows import FlowChain, make_chain

LOGSCALE_MIN = -5.0
LOGSCALE_MAX = 2.0
LOGSCALE_INIT = -1.0

NOISE_MODELS = ("conditional", "average")


@dataclass
class ActionSample:
    """One batch of sampled actions with the recorded sampling path."""

    action: np.ndarray  # (m, d)
    log_prob: np.ndarray  # (m,)
    eps: np.ndarray  # (m, d) base noise
    z: np.ndarray  # (m, d) pre-flow variable


@dataclass
class GraphSample:
    """Graph-path sample: differentiable action and log-density."""

    action: Var
    log_prob: Var  # (m, 1)
    z: Var
    eps: np.ndarray
    theta: Var  # leaf over the base-policy parameters
    phi: Var | None  # leaf over the flow parameters (None if there are none)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} produced a non-finite output")


class GaussianPolicy:
    """Diagonal Gaussian policy (the no-flow baseline)."""

    flow_family = "none"
    n_flows = 0

    def __init__(self, state_dim: int, action_dim: int, hidden=(8,),
                 noise_model: str = "average", rng: np.random.Generator | None = None,
                 activation: str = "tanh"):
        if noise_model not in NOISE_MODELS:
            raise ConfigurationError(f"unknown noise model {noise_model!r}")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.noise_model = noise_model
        self.activation = activation

        trunk_sizes = [state_dim, *self.hidden]
        feat_dim = trunk_sizes[-1]
        n_trunk = DenseNet(trunk_sizes, [activation] * len(self.hidden)).n_params if self.hidden else 0
        n_mu_head = feat_dim * action_dim + action_dim
        if noise_model == "conditional":
            n_scale = feat_dim * action_dim + action_dim
        else:
            n_scale = action_dim
        self._n_mu = n_trunk + n_mu_head
        self.theta = np.zeros(self._n_mu + n_scale, dtype=np.float64)

        self.trunk = (
            DenseNet(trunk_sizes, [activation] * len(self.hidden), params=self.theta[:n_trunk])
            if self.hidden
            else None
        )
        self.mu_head = DenseNet(
            [feat_dim, action_dim], ["identity"], params=self.theta[n_trunk : self._n_mu]
        )
        if noise_model == "conditional":
            self.scale_head = DenseNet(
                [feat_dim, action_dim], ["identity"], params=self.theta[self._n_mu :]
            )
            self.logscale_vec = None
        else:
            self.scale_head = None
            self.logscale_vec = self.theta[self._n_mu :]
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        if self.trunk is not None:
            self.trunk.init_params(rng)
        self.mu_head.init_params(rng)
        if self.scale_head is not None:
            self.scale_head.init_params(rng)
            self.scale_head.params[-self.action_dim :] = LOGSCALE_INIT  # bias
        else:
            self.logscale_vec[:] = LOGSCALE_INIT

    # -- parameter bookkeeping ------------------------------------------------

    def count_params(self) -> int:
        return self.theta.size

    def param_groups(self) -> dict[str, np.ndarray]:
        return {
            "policy.mu": self.theta[: self._n_mu],
            "policy.scale": self.theta[self._n_mu :],
        }

    def describe(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "hidden": list(self.hidden),
            "noise_model": self.noise_model,
            "activation": self.activation,
            "flow_family": self.flow_family,
            "n_flows": self.n_flows,
        }

    # -- numpy paths ------------------------------------------------------------

    def _embed_np(self, states: np.ndarray):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        feats = self.trunk.apply_np(states) if self.trunk is not None else states
        mu = self.mu_head.apply_np(feats)
        if self.scale_head is not None:
            logs = self.scale_head.apply_np(feats)
        else:
            logs = np.broadcast_to(self.logscale_vec, mu.shape)
        logs = np.clip(logs, LOGSCALE_MIN, LOGSCALE_MAX)
        _check_finite("policy mean head", mu)
        _check_finite("policy scale model", logs)
        return mu, logs

    def pre_flow_params_np(self, states: np.ndarray):
        """(mu, sigma) of the base Gaussian at the given states."""
        mu, logs = self._embed_np(states)
        return mu, np.exp(logs)

    def sample_np(self, states, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> ActionSample:
        mu, logs = self._embed_np(states)
        if eps is None:
            eps = rng.standard_normal(mu.shape)
        sigma = np.exp(logs)
        z = eps * sigma + mu
        d = self.action_dim
        base = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * np.sum(eps * eps, axis=1)
        log_prob = base - np.sum(np.broadcast_to(logs, mu.shape), axis=1)
        return ActionSample(action=z, log_prob=log_prob, eps=eps, z=z)

    def deterministic_np(self, states) -> np.ndarray:
        mu, _ = self._embed_np(states)
        return mu

    # -- graph path ---------------------------------------------------------

    def _embed(self, g: Graph, states: np.ndarray, theta: Var):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        s_var = g.const(states)
        ids = theta.ids.reshape(-1)
        n_trunk = self.trunk.n_params if self.trunk is not None else 0
        feats = (
            self.trunk.apply(s_var, Var(g, ids[:n_trunk]))
            if self.trunk is not None
            else s_var
        )
        mu = self.mu_head.apply(feats, Var(g, ids[n_trunk : self._n_mu]))
        if self.scale_head is not None:
            logs = self.scale_head.apply(feats, Var(g, ids[self._n_mu :]))
        else:
            logs = Var(g, ids[self._n_mu :])
        logs = logs.clip(LOGSCALE_MIN, LOGSCALE_MAX)
        _check_finite("policy mean head", mu.values)
        _check_finite("policy scale model", logs.values)
        return mu, logs

    def _base_sample(self, g: Graph, states, rng, eps):
        theta = g.leaf(self.theta)
        mu, logs = self._embed(g, states, theta)
        if eps is None:
            eps = rng.standard_normal(mu.shape)
        sigma = logs.exp()
        z = g.const(eps) * sigma + mu
        d = self.action_dim
        base = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * np.sum(eps * eps, axis=1, keepdims=True)
        partial = g.const(base) - logs.rowsum()
        return theta, mu, logs, z, partial, eps

    def sample(self, g: Graph, states, rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> GraphSample:
        theta, _, _, z, log_prob, eps = self._base_sample(g, states, rng, eps)
        return GraphSample(action=z, log_prob=log_prob, z=z, eps=eps, theta=theta, phi=None)


class NFPolicy(GaussianPolicy):
    """Gaussian base transformed by a chain of invertible flow layers."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(8,),
                 noise_model: str = "average", flow_family: str = "radial",
                 n_flows: int = 4, rng: np.random.Generator | None = None,
                 activation: str = "tanh", flow_init_scale: float = 0.01):
        self._flow_init_scale = flow_init_scale
        template = make_chain(flow_family, n_flows, action_dim)
        self.flow_family = flow_family
        self.n_flows = n_flows
        self.phi = np.zeros(template.n_params, dtype=np.float64)
        ofs = 0
        for layer in template.layers:
            k = layer.n_params
            layer.raw = self.phi[ofs : ofs + k]
            ofs += k
        self.chain = template
        super().__init__(state_dim, action_dim, hidden, noise_model, rng=None,
                         activation=activation)
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        super().init_params(rng)
        self.chain.init_params(rng, self._flow_init_scale)

    def count_params(self) -> int:
        return self.theta.size + self.phi.size

    def param_groups(self) -> dict[str, np.ndarray]:
        groups = super().param_groups()
        ofs = 0
        for i, layer in enumerate(self.chain.layers):
            groups[f"policy.flow[{i}]"] = self.phi[ofs : ofs + layer.n_params]
            ofs += layer.n_params
        return groups

    def _flow_vars(self, g: Graph, phi: Var):
        ids = phi.ids.reshape(-1)
        out = []
        ofs = 0
        for layer in self.chain.layers:
            out.append(Var(g, ids[ofs : ofs + layer.n_params]))
            ofs += layer.n_params
        return out

    def sample_np(self, states, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> ActionSample:
        base = super().sample_np(states, rng, eps)
        action, sum_logdet = self.chain.apply_np(base.z)
        return ActionSample(
            action=action,
            log_prob=base.log_prob - sum_logdet,
            eps=base.eps,
            z=base.z,
        )

    def deterministic_np(self, states) -> np.ndarray:
        mu = super().deterministic_np(states)
        action, _ = self.chain.apply_np(mu)
        return action

    def sample(self, g: Graph, states, rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> GraphSample:
        theta, _, _, z, partial, eps = self._base_sample(g, states, rng, eps)
        phi = g.leaf(self.phi) if self.phi.size else None
        raw_vars = self._flow_vars(g, phi) if phi is not None else []
        action, sum_logdet = self.chain.apply(z, raw_vars)
        log_prob = partial - sum_logdet
        return GraphSample(action=action, log_prob=log_prob, z=z, eps=eps,
                           theta=theta, phi=phi)


def make_policy(state_dim: int, action_dim: int, hidden, noise_model: str,
                flow_family: str, n_flows: int,
                rng: np.random.Generator | None = None,
                flow_init_scale: float = 0.01):
    """Policy factory; flow_family 'none' gives the plain Gaussian baseline."""
    if flow_family == "none":
        return GaussianPolicy(state_dim, action_dim, hidden, noise_model, rng=rng)
    return NFPolicy(state_dim, action_dim, hidden, noise_model, flow_family,
                    n_flows, rng=rng, flow_init_scale=flow_init_scale)
