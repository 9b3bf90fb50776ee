"""Off-policy training engine.

One learning step performs, in order and with separate Adam states:

  1. value function V        <- gradient of L_V (target: Q(s, a~) - alpha log pi, stop-grad)
  2. critic Q                <- gradient of L_Q (target: r + gamma (1-done) V_target(s'), stop-grad)
  3. base policy parameters  <- gradient of L_pi
  4. flow parameters         <- gradient of L_pi (same minibatch and noise draw)

followed by a Polyak update of the value target network.  Gradient-stopped
targets are computed outside the graph in plain numpy, so the structural
separation of the four parameter groups (policy gradients never reach the
critic weights, critic gradients never reach the policy) holds by
construction rather than by masking.

Each run is single-threaded and fully determined by its RNG bundle; the
bundle derives independent counter-based streams per consumer so that, e.g.,
adding analysis draws never perturbs training randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sacnf.autodiff import (
    Adam,
    ConfigurationError,
    DenseNet,
    Graph,
    NumericError,
    Var,
    concat,
    vmin,
)
from sacnf.policy import GraphSample, make_policy

LOSS_GUARD = 1e6


class BufferNotReady(RuntimeError):
    """Raised when fewer transitions are stored than the requested batch."""


class TrainingDiverged(RuntimeError):
    """A loss exceeded the guard or went non-finite; carries diagnostics.

    When raised out of train(), the partial metric log is attached as .log.
    """

    def __init__(self, env_step: int, losses: dict):
        super().__init__(f"training diverged at env step {env_step}: {losses}")
        self.env_step = env_step
        self.losses = losses
        self.log = None


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray  # float 0/1


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1_000_000):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._s = np.zeros((capacity, state_dim))
        self._a = np.zeros((capacity, action_dim))
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, state_dim))
        self._d = np.zeros(capacity)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition) -> None:
        s = np.asarray(t.state, dtype=np.float64).reshape(-1)
        a = np.asarray(t.action, dtype=np.float64).reshape(-1)
        s2 = np.asarray(t.next_state, dtype=np.float64).reshape(-1)
        if s.size != self.state_dim or s2.size != self.state_dim:
            raise ConfigurationError("transition state dims do not match buffer")
        if a.size != self.action_dim:
            raise ConfigurationError("transition action dim does not match buffer")
        if not np.isfinite(t.reward):
            raise ConfigurationError("transition reward must be finite")
        i = self._head
        self._s[i] = s
        self._a[i] = a
        self._r[i] = t.reward
        self._s2[i] = s2
        self._d[i] = 1.0 if t.done else 0.0
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, m: int, rng: np.random.Generator) -> Batch:
        """m transitions drawn uniformly with replacement."""
        if self._size < m:
            raise BufferNotReady(f"buffer holds {self._size} < batch {m}")
        idx = rng.integers(0, self._size, size=m)
        return Batch(
            states=self._s[idx].copy(),
            actions=self._a[idx].copy(),
            rewards=self._r[idx].copy(),
            next_states=self._s2[idx].copy(),
            dones=self._d[idx].copy(),
        )


class CriticPair:
    """Q network over (s, a), value network over s, and its Polyak target."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(32,),
                 rng: np.random.Generator | None = None, twin_q: bool = False,
                 activation: str = "tanh"):
        acts = [activation] * len(hidden) + ["identity"]
        q_sizes = [state_dim + action_dim, *hidden, 1]
        v_sizes = [state_dim, *hidden, 1]
        n_q = DenseNet(q_sizes, acts).n_params
        self.twin_q = twin_q
        self.omega = np.zeros(n_q * (2 if twin_q else 1), dtype=np.float64)
        self.q = DenseNet(q_sizes, acts, params=self.omega[:n_q])
        self.q2 = DenseNet(q_sizes, acts, params=self.omega[n_q:]) if twin_q else None
        self.v = DenseNet(v_sizes, acts)
        self.v_target = DenseNet(v_sizes, acts)
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        self.q.init_params(rng)
        if self.q2 is not None:
            self.q2.init_params(rng)
        self.v.init_params(rng)
        self.v_target.params[:] = self.v.params

    def q_np(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([states, actions], axis=1)
        q = self.q.apply_np(x)[:, 0]
        if self.q2 is not None:
            q = np.minimum(q, self.q2.apply_np(x)[:, 0])
        return q

    def param_groups(self) -> dict[str, np.ndarray]:
        return {
            "critic.q": self.omega,
            "critic.v": self.v.params,
            "critic.v_target": self.v_target.params,
        }


def polyak_update(target_params: np.ndarray, online_params: np.ndarray, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise in place."""
    if target_params.shape != online_params.shape:
        raise ConfigurationError("polyak update needs aligned parameter arrays")
    target_params *= 1.0 - tau
    target_params += tau * online_params


# -- losses ---------------------------------------------------------------


def q_loss(g: Graph, batch: Batch, critics: CriticPair, gamma: float):
    """Mean 1/2 (Q(s,a) - (r + gamma (1-done) V_target(s')))^2.

    The bootstrap target is computed graph-free (stop-gradient); only the
    critic weights are differentiable.  Returns (loss, omega leaf Var).
    """
    if batch.states.shape[0] == 0:
        raise ConfigurationError("q_loss needs a non-empty batch")
    vt = critics.v_target.apply_np(batch.next_states)[:, 0]
    target = batch.rewards + gamma * (1.0 - batch.dones) * vt
    omega = g.leaf(critics.omega)
    ids = omega.ids.reshape(-1)
    x = g.const(np.concatenate([batch.states, batch.actions], axis=1))
    t = g.const(target[:, None])
    n_q = critics.q.n_params
    q1 = critics.q.apply(x, Var(g, ids[:n_q]))
    loss = ((q1 - t).square() * 0.5).batch_mean()
    if critics.q2 is not None:
        q2 = critics.q2.apply(x, Var(g, ids[n_q:]))
        loss = loss + ((q2 - t).square() * 0.5).batch_mean()
    return loss, omega


def v_loss(g: Graph, batch: Batch, critics: CriticPair, policy, alpha_ent: float,
           rng: np.random.Generator, eps: np.ndarray | None = None):
    """Mean 1/2 (V(s) - (Q(s, a~) - alpha log pi(a~|s)))^2.

    One fresh action sample per state (single-sample Monte Carlo); the target
    is graph-free.  Returns (loss, nu leaf Var).
    """
    if batch.states.shape[0] == 0:
        raise ConfigurationError("v_loss needs a non-empty batch")
    samp = policy.sample_np(batch.states, rng, eps=eps)
    q = critics.q_np(batch.states, samp.action)
    target = q - alpha_ent * samp.log_prob
    nu = g.leaf(critics.v.params)
    v = critics.v.apply(g.const(batch.states), nu)
    loss = ((v - g.const(target[:, None])).square() * 0.5).batch_mean()
    return loss, nu


def pi_loss(g: Graph, batch: Batch, critics: CriticPair, policy, alpha_ent: float,
            rng: np.random.Generator, eps: np.ndarray | None = None):
    """Mean (alpha log pi(a~|s) - Q(s, a~)) over reparametrized samples.

    Gradients flow into the policy (and flow) parameters through both the
    log-density and the action inside Q; the critic weights enter as plain
    constants, so they own no graph nodes at all.  Returns (loss, GraphSample).
    """
    if batch.states.shape[0] == 0:
        raise ConfigurationError("pi_loss needs a non-empty batch")
    sample: GraphSample = policy.sample(g, batch.states, rng, eps=eps)
    x = concat([g.const(batch.states), sample.action])
    qa = critics.q.apply(x, None)
    if critics.q2 is not None:
        qa = vmin(qa, critics.q2.apply(x, None))
    loss = (sample.log_prob * alpha_ent - qa).batch_mean()
    return loss, sample


# -- training loop -------------------------------------------------------------


class RngBundle:
    """Independent Philox streams per consumer, derived from one seed."""

    STREAMS = ("init", "env", "noise", "warmup", "buffer", "analysis")

    def __init__(self, seed: int):
        self.seed = seed
        root = np.random.SeedSequence(seed)
        children = root.spawn(len(self.STREAMS))
        for name, child in zip(self.STREAMS, children):
            setattr(self, name, np.random.Generator(np.random.Philox(child)))


@dataclass
class MetricRow:
    env_step: int
    episode: int
    train_return: float
    eval_return_mean: float
    eval_return_std: float
    loss_q: float
    loss_v: float
    loss_pi: float
    policy_entropy_mc: float


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray
    terminal_positions: np.ndarray


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    policy: object = None
    critics: object = None
    env_steps: int = 0
    episodes: int = 0
    stopped_early: bool = False


def evaluate(policy, env, episodes: int) -> EvalResult:
    """Deterministic-policy episodes (noise set to zero); no RNG consumed."""
    returns = np.zeros(episodes)
    terminals = np.zeros((episodes, 2))
    for k in range(episodes):
        state = env.reset()
        total = 0.0
        done = False
        while not done:
            a = policy.deterministic_np(env.observe(state)[None, :])[0]
            state, r, done = env.step(state, a)
            total += r
        returns[k] = total
        terminals[k] = state.position
    return EvalResult(float(returns.mean()), float(returns.std()), returns, terminals)


def rollout_stochastic(policy, env, rng: np.random.Generator):
    """One stochastic episode; returns (return, trajectory positions (T+1, 2))."""
    state = env.reset(rng)
    positions = [state.position.copy()]
    total = 0.0
    done = False
    while not done:
        a = policy.sample_np(env.observe(state)[None, :], rng).action[0]
        state, r, done = env.step(state, a)
        positions.append(state.position.copy())
        total += r
    return total, np.array(positions)


def _guard(env_step: int, losses: dict) -> None:
    for name, value in losses.items():
        if not np.isfinite(value) or abs(value) > LOSS_GUARD:
            raise TrainingDiverged(env_step, losses)


def learning_step(g: Graph, batch: Batch, policy, critics: CriticPair, adams: dict,
                  cfg, rng: np.random.Generator, env_step: int = 0):
    """The four update lines on one minibatch, applied sequentially so each
    later loss sees the already-updated earlier networks.  The policy and
    flow updates share one loss graph and noise draw; the flow gradient is
    extracted before the base-policy parameters move.  Returns the three
    loss values and the Monte-Carlo entropy of the policy samples."""
    g.reset()
    lv, nu = v_loss(g, batch, critics, policy, cfg.alpha_ent, rng)
    lv_val = lv.item()
    _guard(env_step, {"loss_v": lv_val})
    g.backward(lv)
    adams["nu"].step(critics.v.params, g.grad(nu).ravel())

    g.reset()
    lq, omega = q_loss(g, batch, critics, gamma=cfg.gamma)
    lq_val = lq.item()
    _guard(env_step, {"loss_q": lq_val})
    g.backward(lq)
    adams["omega"].step(critics.omega, g.grad(omega).ravel())

    g.reset()
    lp, sample = pi_loss(g, batch, critics, policy, cfg.alpha_ent, rng)
    lp_val = lp.item()
    entropy = -float(sample.log_prob.values.mean())
    _guard(env_step, {"loss_pi": lp_val})
    g.backward(lp)
    grad_theta = g.grad(sample.theta).ravel()
    grad_phi = g.grad(sample.phi).ravel() if sample.phi is not None else None
    adams["theta"].step(policy.theta, grad_theta)
    if grad_phi is not None and grad_phi.size:
        adams["phi"].step(policy.phi, grad_phi)

    polyak_update(critics.v_target.params, critics.v.params, cfg.tau)
    return lq_val, lv_val, lp_val, entropy


def make_adams(policy, critics: CriticPair, cfg) -> dict:
    return {
        "nu": Adam(critics.v.params.size, lr=cfg.lr_v),
        "omega": Adam(critics.omega.size, lr=cfg.lr_q),
        "theta": Adam(policy.theta.size, lr=cfg.lr_theta),
        "phi": Adam(policy.phi.size if hasattr(policy, "phi") else 0, lr=cfg.lr_phi),
    }


def build_agent(cfg, env, rng: np.random.Generator):
    policy = make_policy(env.state_dim, env.action_dim, cfg.policy_hidden,
                         cfg.noise_model, cfg.flow_family, cfg.n_flows, rng=rng,
                         flow_init_scale=cfg.flow_init_scale)
    critics = CriticPair(env.state_dim, env.action_dim, cfg.critic_hidden,
                         rng=rng, twin_q=cfg.twin_q,
                         activation=getattr(cfg, "critic_activation", "relu"))
    return policy, critics


def train(cfg, env, rngs: RngBundle, policy=None, critics=None,
          checkpoint_cb=None) -> TrainingLog:
    """Run the full outer loop; returns the metric log with the final agent.

    Raises TrainingDiverged if any loss leaves the guard band.  A provided
    (policy, critics) pair is trained in place; otherwise a fresh agent is
    initialized from the bundle's init stream.
    """
    if policy is None or critics is None:
        new_policy, new_critics = build_agent(cfg, env, rngs.init)
        policy = policy or new_policy
        critics = critics or new_critics
    adams = make_adams(policy, critics, cfg)
    buffer = ReplayBuffer(env.state_dim, env.action_dim, cfg.buffer_capacity)
    g = Graph()
    log = TrainingLog(policy=policy, critics=critics)

    state = env.reset(rngs.env)
    episode_return = 0.0
    last_train_return = float("nan")

    for step in range(1, cfg.total_env_steps + 1):
        obs = env.observe(state)
        if step <= cfg.warmup_steps:
            a = rngs.warmup.uniform(env.spec.action_low, env.spec.action_high,
                                    size=env.action_dim)
        else:
            a = policy.sample_np(obs[None, :], rngs.noise).action[0]
        next_state, r, done = env.step(state, a)
        # bootstrap masking only at true terminals; horizon truncation is not
        # an environment property, so the value target must see through it
        terminal = env.terminal_at(next_state.position)
        buffer.push(Transition(obs, a, r, env.observe(next_state), terminal))
        episode_return += r
        state = next_state
        if done:
            last_train_return = episode_return
            log.episodes += 1
            episode_return = 0.0
            state = env.reset(rngs.env)

        learned = False
        lq = lv = lp = entropy = float("nan")
        if (step > cfg.warmup_steps and step % cfg.learn_every == 0
                and len(buffer) >= cfg.batch_size):
            batch = buffer.sample(cfg.batch_size, rngs.buffer)
            try:
                lq, lv, lp, entropy = learning_step(
                    g, batch, policy, critics, adams, cfg, rngs.noise, env_step=step
                )
            except TrainingDiverged as exc:
                log.env_steps = step
                exc.log = log
                raise
            learned = True

        eval_mean = eval_std = float("nan")
        eval_due = step % cfg.eval_every == 0
        if eval_due:
            ev = evaluate(policy, env, cfg.eval_episodes)
            eval_mean, eval_std = ev.mean, ev.std

        if learned or eval_due:
            log.rows.append(MetricRow(step, log.episodes, last_train_return,
                                      eval_mean, eval_std, lq, lv, lp, entropy))
        log.env_steps = step

        if checkpoint_cb is not None and cfg.checkpoint_every > 0 \
                and step % cfg.checkpoint_every == 0:
            checkpoint_cb(step, policy, critics)

        if (eval_due and cfg.stop_eval_return is not None
                and eval_mean >= cfg.stop_eval_return):
            log.stopped_early = True
            break

    return log
