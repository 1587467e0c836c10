"""Policy rollouts, return-to-go bookkeeping for DT inference, and scoring.

Rollouts of one evaluation point run in lockstep: one environment instance
per rollout seed, one batched policy call per timestep. A single ``rollout``
is the same code path with a batch of one.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .data import Trajectory
from .envs import Environment, make_env
from .errors import ConfigError, DimensionError
from .policies import DTPolicy, MLPPolicy


def normalized_score(raw, random_ref, expert_ref):
    """``100 * (raw - random_ref) / (expert_ref - random_ref)``."""
    if expert_ref == random_ref:
        raise ConfigError("expert_ref and random_ref must differ")
    out = 100.0 * (np.asarray(raw, dtype=np.float64) - random_ref) / (expert_ref - random_ref)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class EvalConfig:
    n_rollouts: int = 50
    eval_every_epochs: int = 50
    seeds: tuple = (0, 1, 2, 3, 4)
    rtg_target: Optional[float] = None
    random_ref: Optional[float] = None
    expert_ref: Optional[float] = None

    def __post_init__(self):
        problems = []
        if self.n_rollouts < 1:
            problems.append(f"n_rollouts must be >= 1, got {self.n_rollouts}")
        if self.eval_every_epochs < 1:
            problems.append(f"eval_every_epochs must be >= 1, got {self.eval_every_epochs}")
        if not self.seeds:
            problems.append("at least one seed is required")
        if (self.random_ref is not None and self.expert_ref is not None
                and self.random_ref == self.expert_ref):
            problems.append("expert_ref and random_ref must differ")
        if problems:
            raise ConfigError(problems)


# ---------------------------------------------------------------------------
# DT inference


class DTSession:
    """Rolling window of the last K (return-to-go, state, action) triplets.

    The return-to-go starts at ``rtg_target``; after each reward it is
    ``rtg_target - (r_0 + ... + r_j)`` with the rewards summed in arrival order.
    """

    def __init__(self, policy: DTPolicy, rtg_target: float, batch: int = 1):
        self.policy = policy
        self.K = policy.config.context_K
        self.target = float(rtg_target)
        self.batch = batch
        self.observed = np.zeros(batch)
        self.rtg = np.full(batch, self.target)
        self.t = 0
        self.window = deque(maxlen=self.K)  # entries: [rtg (B,), state (B, d_s), action (B, d_a) | None, t]
        self.rtg_trace = []

    def act(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64).reshape(self.batch, -1)
        if self.window and self.window[-1][2] is None:
            raise RuntimeError("act() called twice without update()")
        self.window.append([self.rtg.copy(), states, None, self.t])
        assert len(self.window) <= self.K, "DT window exceeds context length"
        self.rtg_trace.append(self.rtg.copy())
        k = len(self.window)
        d_a = self.policy.config.d_a
        rtg = np.stack([w[0] for w in self.window], axis=1)
        st = np.stack([w[1] for w in self.window], axis=1)
        act = np.zeros((self.batch, k, d_a))
        for j, w in enumerate(list(self.window)[:-1]):
            act[:, j] = w[2]
        ts = np.broadcast_to(np.array([w[3] for w in self.window]), (self.batch, k))
        pred = self.policy.forward(rtg, st, act, ts, train=False).data[:, -1]
        return pred

    def update(self, actions, rewards):
        """Record the executed ``actions`` and the ``rewards`` they earned."""
        self.window[-1][2] = np.asarray(actions, dtype=np.float64).reshape(self.batch, -1)
        self.observed = self.observed + np.asarray(rewards, dtype=np.float64).reshape(self.batch)
        self.rtg = self.target - self.observed
        self.t += 1


def dt_infer_step(policy: DTPolicy, session: DTSession, state) -> np.ndarray:
    return session.act(np.asarray(state)[None])[0]


# ---------------------------------------------------------------------------
# rollouts


class SparsifiedReward(Environment):
    """Wraps a dense environment so every reward is delivered on the last step."""

    def __init__(self, env: Environment):
        self.env = env
        self.name, self.d_s, self.d_a, self.horizon = env.name, env.d_s, env.d_a, env.horizon
        self.reward_mode = "sparsified"
        self._acc = 0.0

    def reset(self, seed):
        self._acc = 0.0
        return self.env.reset(seed)

    def step(self, action):
        s, r, done = self.env.step(action)
        self._acc = self._acc + r
        return s, (self._acc if done else 0.0), done

    def success(self):
        return None


def make_eval_env(name, regime) -> Environment:
    if regime == "sparse":
        return make_env(name, "sparse")
    env = make_env(name, "dense")
    return SparsifiedReward(env) if regime == "sparsified" else env


@dataclass
class RolloutResult:
    trajectory: Trajectory
    ret: float
    success: Optional[bool]
    rtg: Optional[np.ndarray] = None
    observed_rewards: Optional[np.ndarray] = field(default=None, repr=False)


def rollout_batch(policy, env_name, regime, seeds, rtg_target=None):
    """Run one episode per seed in lockstep. ``policy`` is an MLP, a DT or any state -> action callable."""
    envs = [make_eval_env(env_name, regime) for _ in seeds]
    B = len(envs)
    d_s, d_a = envs[0].d_s, envs[0].d_a
    if isinstance(policy, (MLPPolicy, DTPolicy)):
        if policy.config.d_s != d_s or policy.config.d_a != d_a:
            raise DimensionError(f"policy dims ({policy.config.d_s}, {policy.config.d_a}) do not match "
                                 f"{env_name} ({d_s}, {d_a})")
    session = None
    if isinstance(policy, DTPolicy):
        if rtg_target is None:
            raise ConfigError("DT rollouts need an rtg_target")
        session = DTSession(policy, rtg_target, batch=B)
    states = np.stack([env.reset(seed) for env, seed in zip(envs, seeds)])
    S, A, R = [], [], []
    done = False
    while not done:
        if session is not None:
            actions = session.act(states)
        elif isinstance(policy, MLPPolicy):
            actions = policy.act(states)
        else:
            actions = np.stack([np.asarray(policy(s), dtype=np.float64).reshape(d_a) for s in states])
        actions = np.clip(actions, -1.0, 1.0)
        S.append(states)
        A.append(actions)
        steps = [env.step(a) for env, a in zip(envs, actions)]
        states = np.stack([s for s, _, _ in steps])
        rewards = np.array([r for _, r, _ in steps])
        R.append(rewards)
        if session is not None:
            session.update(actions, rewards)
        done = steps[0][2]
    S, A, R = np.stack(S, 1), np.stack(A, 1), np.stack(R, 1)
    rtg = np.stack(session.rtg_trace, 1) if session is not None else None
    out = []
    for i, env in enumerate(envs):
        success = env.success() if regime == "sparse" else None
        traj = Trajectory(S[i], A[i], R[i], success)
        ret = 0.0
        for r in R[i]:
            ret = ret + r
        out.append(RolloutResult(traj, float(ret), success, None if rtg is None else rtg[i], R[i]))
    return out


def rollout(policy, env: Environment, seed, rtg_target=None):
    """One episode; returns ``(trajectory, return, success)``."""
    regime = getattr(env, "reward_mode", "dense")
    res = rollout_batch(policy, env.name, regime, [seed], rtg_target)[0]
    return res.trajectory, res.ret, res.success


def eval_seeds(seed, eval_index, n):
    return [rngmod.derive_seed(seed, "eval", eval_index, i) for i in range(n)]


def pairwise_mean(values):
    """Mean of presorted values; independent of the order results arrived in."""
    return float(math.fsum(sorted(values)) / len(values))


def evaluate_policy(policy, env_name, regime, seed, eval_index, n_rollouts, rtg_target=None,
                    random_ref=None, expert_ref=None):
    """Score one evaluation point: success rate (sparse) or normalized return."""
    results = rollout_batch(policy, env_name, regime, eval_seeds(seed, eval_index, n_rollouts), rtg_target)
    returns = [r.ret for r in results]
    out = {"eval_index": eval_index, "n_rollouts": len(results), "mean_return": pairwise_mean(returns),
           "returns": returns}
    if regime == "sparse":
        succ = [1.0 if r.success else 0.0 for r in results]
        out["success_rate"] = pairwise_mean(succ)
        out["score"] = out["success_rate"]
    else:
        if random_ref is None or expert_ref is None:
            raise ConfigError("normalized scoring needs random_ref and expert_ref")
        out["score"] = float(normalized_score(out["mean_return"], random_ref, expert_ref))
    return out


def scripted_reference(env_name, quality, n_episodes=1000, seed=0, noise_scale=0.0):
    """Mean return and success rate of a scripted policy (for freezing reference scores)."""
    from .envs import ENVS, ScriptedPolicy
    env_cls = ENVS[env_name]
    pol = ScriptedPolicy(env_cls, quality, noise_scale, rngmod.stream(seed, "reference", quality))
    regime = "sparse" if "sparse" in env_cls.reward_modes and env_cls.reward_modes[0] == "sparse" else "dense"
    results = rollout_batch(pol, env_name, regime, eval_seeds(seed, "reference", n_episodes))
    returns = [r.ret for r in results]
    succ = [bool(r.success) for r in results] if regime == "sparse" else None
    return {"mean_return": pairwise_mean(returns),
            "success_rate": None if succ is None else sum(succ) / len(succ)}
