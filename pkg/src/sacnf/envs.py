"""Desk-scale 2-D point-mass navigation environments.

Dynamics are shared: actions clip to [-1, 1]^2, positions integrate as
p' = clip(p + a, room bounds), and the reward is a pure function of the new
position.  Three reward maps:

  deceptive  - a locally rewarding strip near the start, a terminal pit of
               large negative reward blocking the straight path, and a
               terminal high-reward goal disk on the far side of the room.
  four_goal  - four goals placed symmetrically around the origin; reward is
               the negative Euclidean distance to the closest goal.
  sparse     - +1 whenever the agent sits beyond a radius threshold,
               0 otherwise (zero gradient until the threshold is crossed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sacnf.autodiff import ConfigurationError, NumericError

ROOM_HALF = 6.0
ACTION_LIMIT = 1.0


@dataclass
class PointState:
    position: np.ndarray  # (2,)
    steps: int


@dataclass(frozen=True)
class EnvSpec:
    name: str
    horizon: int
    action_low: float = -ACTION_LIMIT
    action_high: float = ACTION_LIMIT
    room_low: float = -ROOM_HALF
    room_high: float = ROOM_HALF


class PointEnv:
    """Base point-mass room; subclasses define the reward map and terminals."""

    start = np.zeros(2)

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 2

    def reset(self, rng: np.random.Generator | None = None) -> PointState:
        return PointState(position=self.start.copy(), steps=0)

    def observe(self, state: PointState) -> np.ndarray:
        return state.position.copy()

    def step(self, state: PointState, action: np.ndarray):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.size != 2:
            raise ConfigurationError(f"expected 2-D action, got shape {action.shape}")
        if not np.isfinite(action).all():
            raise NumericError("non-finite action passed to env.step")
        a = np.clip(action, self.spec.action_low, self.spec.action_high)
        p = np.clip(state.position + a, self.spec.room_low, self.spec.room_high)
        reward = self.reward_at(p)
        steps = state.steps + 1
        done = self.terminal_at(p) or steps >= self.spec.horizon
        return PointState(position=p, steps=steps), float(reward), bool(done)

    def reward_at(self, p: np.ndarray) -> float:
        raise NotImplementedError

    def terminal_at(self, p: np.ndarray) -> bool:
        return False


class DeceptiveRoomEnv(PointEnv):
    """Locally optimal strip, a terminal pit on the straight path, and a
    far goal disk reachable along the room boundary."""

    start = np.array([4.5, 0.0])

    STRIP_X = (3.5, 5.5)
    STRIP_REWARD = 0.5
    PIT_CENTER = np.zeros(2)
    PIT_RADIUS = 2.5
    PIT_REWARD = -50.0
    GOAL_CENTER = np.array([-4.5, 0.0])
    GOAL_RADIUS = 0.75
    GOAL_REWARD = 100.0

    def __init__(self):
        super().__init__(EnvSpec(name="deceptive", horizon=100))

    def in_pit(self, p) -> bool:
        return float(np.linalg.norm(p - self.PIT_CENTER)) <= self.PIT_RADIUS

    def in_goal(self, p) -> bool:
        return float(np.linalg.norm(p - self.GOAL_CENTER)) <= self.GOAL_RADIUS

    def reward_at(self, p: np.ndarray) -> float:
        if self.in_pit(p):
            return self.PIT_REWARD
        if self.in_goal(p):
            return self.GOAL_REWARD
        if self.STRIP_X[0] <= p[0] <= self.STRIP_X[1]:
            return self.STRIP_REWARD
        return 0.0

    def terminal_at(self, p: np.ndarray) -> bool:
        return self.in_pit(p) or self.in_goal(p)


class FourGoalEnv(PointEnv):
    """Four goals at distance 5 from the origin; reward is -min distance."""

    start = np.zeros(2)
    GOALS = np.array([[5.0, 0.0], [0.0, 5.0], [-5.0, 0.0], [0.0, -5.0]])

    def __init__(self):
        super().__init__(EnvSpec(name="four_goal", horizon=20))

    def reward_at(self, p: np.ndarray) -> float:
        return -float(np.min(np.linalg.norm(self.GOALS - p, axis=1)))


class SparseRadiusEnv(PointEnv):
    """+1 per step beyond the distance threshold, 0 inside it."""

    start = np.zeros(2)
    THRESHOLD = 0.6

    def __init__(self):
        super().__init__(EnvSpec(name="sparse", horizon=50))

    def reward_at(self, p: np.ndarray) -> float:
        return 1.0 if float(np.linalg.norm(p)) > self.THRESHOLD else 0.0


_ENVS = {
    "deceptive": DeceptiveRoomEnv,
    "four_goal": FourGoalEnv,
    "sparse": SparseRadiusEnv,
}


def env_names():
    return sorted(_ENVS)


def make_env(name: str) -> PointEnv:
    if name not in _ENVS:
        raise ConfigurationError(f"unknown env {name!r}; known: {', '.join(env_names())}")
    return _ENVS[name]()


def reward_field(env: PointEnv, resolution: int = 121):
    """Sample the reward map on a square grid; rows are (x, y, r)."""
    lo, hi = env.spec.room_low, env.spec.room_high
    xs = np.linspace(lo, hi, resolution)
    ys = np.linspace(lo, hi, resolution)
    rows = np.empty((resolution * resolution, 3))
    k = 0
    for y in ys:
        for x in xs:
            rows[k] = (x, y, env.reward_at(np.array([x, y])))
            k += 1
    return rows
