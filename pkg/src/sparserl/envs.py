"""Toy environments and scripted data generators.

PointReach (sparse by default)
    State ``(x, y, goal_x, goal_y)``, action a velocity in [-1, 1]^2 (clamped
    per component), ``pos <- clip(pos + DT * a, -1, 1)`` with ``DT = 0.045``,
    horizon 50. Start and goal are uniform in the square [-1, 1]^2. Sparse
    reward: 1 on the last step iff the final distance to the goal is below
    0.1, else 0. Dense reward: minus the distance after each step.
    The expert moves straight at the goal with its largest action component
    saturated; the largest start-goal gap along one axis is 2, which takes at
    most 2 / 0.045 < 45 steps, so it always arrives within the horizon.

ChainRun (dense)
    State ``(position, velocity)``, scalar action force in [-1, 1],
    ``v <- 0.9 v + 0.1 a``, ``x <- x + v``; the reward is the forward
    displacement ``v`` of each step, horizon 100. Episodes start at rest at a
    uniform position in [-1, 1]. The expert pushes with a = 1; from rest its
    return is ``sum_{t=1..100} (1 - 0.9**t) = 100 - 9 (1 - 0.9**100)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rngmod
from .data import DatasetMeta, Trajectory, TrajectoryDataset
from .errors import ConfigError, DimensionError


class EnvError(RuntimeError):
    pass


class Environment:
    name = ""
    d_s = 0
    d_a = 0
    horizon = 0
    reward_modes = ()

    def __init__(self, reward_mode: Optional[str] = None):
        self.reward_mode = reward_mode or self.reward_modes[0]
        if self.reward_mode not in self.reward_modes:
            raise ConfigError(f"{self.name} supports reward modes {self.reward_modes}, got {reward_mode!r}")
        self.t = None
        self.done = True
        self._state = None

    def reset(self, seed) -> np.ndarray:
        self._reset(rngmod.stream(seed, "env", self.name, "reset"))
        self.t = 0
        self.done = False
        return self.observe()

    def step(self, action):
        if self.t is None:
            raise EnvError("step() called before reset()")
        if self.done:
            raise EnvError("step() called after the episode ended")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.d_a,):
            raise DimensionError(f"{self.name} expects {self.d_a} action components, got {action.shape}")
        action = np.clip(action, -1.0, 1.0)
        self.t += 1
        self.done = self.t >= self.horizon
        reward = self._advance(action)
        return self.observe(), reward, self.done

    def meta(self, regime=None) -> DatasetMeta:
        return DatasetMeta(self.name, self.d_s, self.d_a, self.horizon,
                           regime or ("sparse" if self.reward_mode == "sparse" else "dense"))

    def success(self) -> Optional[bool]:
        return None


class PointReach(Environment):
    name = "point_reach"
    d_s, d_a, horizon = 4, 2, 50
    reward_modes = ("sparse", "dense")
    DT = 0.045
    TOL = 0.1

    def _reset(self, rng):
        self.pos = rng.uniform(-1.0, 1.0, 2)
        self.goal = rng.uniform(-1.0, 1.0, 2)

    def set_state(self, pos, goal):
        """Place the point and goal directly (for hand-built scenarios)."""
        self.pos = np.array(pos, dtype=np.float64)
        self.goal = np.array(goal, dtype=np.float64)
        self.t, self.done = 0, False
        return self.observe()

    def observe(self):
        return np.concatenate([self.pos, self.goal])

    def distance(self) -> float:
        return float(np.linalg.norm(self.pos - self.goal))

    def _advance(self, action):
        self.pos = np.clip(self.pos + self.DT * action, -1.0, 1.0)
        if self.reward_mode == "dense":
            return -self.distance()
        return 1.0 if (self.done and self.distance() < self.TOL) else 0.0

    def success(self):
        return self.distance() < self.TOL

    @classmethod
    def expert_action(cls, state):
        delta = state[2:4] - state[0:2]
        m = np.max(np.abs(delta))
        if m <= cls.DT:
            return delta / cls.DT
        return delta / m


class ChainRun(Environment):
    name = "chain_run"
    d_s, d_a, horizon = 2, 1, 100
    reward_modes = ("dense",)
    DECAY = 0.9
    GAIN = 0.1

    def _reset(self, rng):
        self.x = float(rng.uniform(-1.0, 1.0))
        self.v = 0.0

    def set_state(self, x, v=0.0):
        self.x, self.v = float(x), float(v)
        self.t, self.done = 0, False
        return self.observe()

    def observe(self):
        return np.array([self.x, self.v])

    def _advance(self, action):
        self.v = self.DECAY * self.v + self.GAIN * float(action[0])
        x_old = self.x
        self.x = self.x + self.v
        return self.x - x_old

    @classmethod
    def expert_action(cls, state):
        return np.ones(1)


ENVS = {PointReach.name: PointReach, ChainRun.name: ChainRun}


def make_env(name, reward_mode=None) -> Environment:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(reward_mode)


# ---------------------------------------------------------------------------
# scripted policies and dataset generation

QUALITIES = ("expert", "medium", "random")


class ScriptedPolicy:
    """expert: the analytic controller; medium: expert + N(0, noise^2) per component; random: U(-1, 1)."""

    def __init__(self, env_cls, quality, noise_scale=0.0, rng=None):
        if quality not in QUALITIES:
            raise ConfigError(f"policy quality must be one of {QUALITIES}, got {quality!r}")
        self.env_cls = env_cls
        self.quality = quality
        self.noise_scale = noise_scale
        self.rng = rng

    def __call__(self, state):
        d_a = self.env_cls.d_a
        if self.quality == "random":
            return self.rng.uniform(-1.0, 1.0, d_a)
        a = self.env_cls.expert_action(np.asarray(state))
        if self.quality == "medium":
            a = a + self.rng.normal(0.0, self.noise_scale, d_a)
        return np.clip(a, -1.0, 1.0)


@dataclass(frozen=True)
class MixtureComponent:
    quality: str
    noise_scale: float = 0.0
    count: int = 0


@dataclass(frozen=True)
class GeneratorSpec:
    mixture: tuple

    def __post_init__(self):
        comps = tuple(c if isinstance(c, MixtureComponent) else MixtureComponent(**c) for c in self.mixture)
        object.__setattr__(self, "mixture", comps)
        problems = []
        for c in comps:
            if c.quality not in QUALITIES:
                problems.append(f"unknown policy quality {c.quality!r}")
            if c.count < 0:
                problems.append(f"count must be >= 0, got {c.count}")
            if c.noise_scale < 0:
                problems.append(f"noise_scale must be >= 0, got {c.noise_scale}")
        if sum(c.count for c in comps) < 1:
            problems.append("mixture must contain at least one episode")
        if problems:
            raise ConfigError(problems)

    @property
    def total(self):
        return sum(c.count for c in self.mixture)


def run_episode(env: Environment, policy, seed):
    """Roll ``policy`` (state -> action) for one episode; returns a Trajectory."""
    s = env.reset(seed)
    states, actions, rewards = [], [], []
    done = False
    while not done:
        a = np.clip(np.asarray(policy(s), dtype=np.float64).reshape(-1), -1.0, 1.0)
        states.append(s)
        actions.append(a)
        s, r, done = env.step(a)
        rewards.append(r)
    success = env.success() if env.reward_mode == "sparse" else None
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), success)


def generate_dataset(env: Environment, spec: GeneratorSpec, seed) -> TrajectoryDataset:
    """Scripted rollouts in mixture order; deterministic in ``seed``."""
    trajs = []
    episode = 0
    for comp in spec.mixture:
        for _ in range(comp.count):
            pol = ScriptedPolicy(type(env), comp.quality, comp.noise_scale,
                                 rngmod.stream(seed, "generate", "policy", episode))
            trajs.append(run_episode(env, pol, rngmod.derive_seed(seed, "generate", "episode", episode)))
            episode += 1
    return TrajectoryDataset(tuple(trajs), env.meta())
