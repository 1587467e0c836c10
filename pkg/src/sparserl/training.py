"""BC, FBC, DT and FDT training loops.

FBC and FDT are literal compositions: the filtered dataset is materialised
and handed to the unchanged BC or DT loop. An "epoch" is
``ceil(total_transitions / batch_size)`` optimizer steps for every method.
"""
from __future__ import annotations

import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .data import TrajectoryDataset, returns_to_go, stack_transitions, state_stats
from .errors import ConfigError, DataError
from .optim import AdamState, adam_step, clip_grad_norm, global_norm, lr_schedule
from .policies import DTPolicy, DTPolicyConfig, MLPPolicy, MLPPolicyConfig
from .rewards import FilterSpec, apply_filter
from .tensor import Tape, mse_loss

METHODS = ("bc", "fbc", "dt", "fdt")
DT_FAMILY = ("dt", "fdt")


@dataclass(frozen=True)
class TrainConfig:
    method: str
    seed: int = 0
    epochs: int = 100
    batch_size: Optional[int] = None
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    warmup_steps: int = 100_000
    lr_decay: float = 0.1
    lr_decay_epoch: int = 80
    context_K: int = 20
    filter: Optional[FilterSpec] = None
    eval_every_epochs: int = 50
    mlp_depth: int = 2
    mlp_hidden: int = 512
    dt_layers: int = 3
    dt_heads: int = 1
    dt_embed_dim: int = 128
    dt_dropout: float = 0.1
    dt_max_episode_length: int = 1000
    dt_pos_encoding: str = "sinusoidal"
    rtg_scale: Optional[float] = None

    def __post_init__(self):
        problems = []
        if self.method not in METHODS:
            problems.append(f"method must be one of {METHODS}, got {self.method!r}")
        needs_filter = self.method in ("fbc", "fdt")
        if needs_filter and self.filter is None:
            problems.append(f"method {self.method} needs a filter")
        if not needs_filter and self.filter is not None:
            problems.append(f"method {self.method} takes no filter")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if self.grad_clip <= 0:
            problems.append(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.warmup_steps < 1:
            problems.append(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.context_K < 1:
            problems.append(f"context_K must be >= 1, got {self.context_K}")
        if self.eval_every_epochs < 1:
            problems.append(f"eval_every_epochs must be >= 1, got {self.eval_every_epochs}")
        if problems:
            raise ConfigError(problems)

    @property
    def family(self) -> str:
        return "dt" if self.method in DT_FAMILY else "bc"

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 512 if self.family == "dt" else 100

    def base(self) -> "TrainConfig":
        """The unfiltered method this one composes with (bc for fbc, dt for fdt)."""
        return replace(self, method=self.family, filter=None)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)    # (step, lr, loss, grad_norm_pre, grad_norm_post)
    epochs: list = field(default_factory=list)   # (epoch, mean_loss)
    evals: list = field(default_factory=list)    # dicts from the evaluator
    best_eval_params: Optional[np.ndarray] = None
    best_eval_step: int = -1
    steps_per_epoch: int = 0
    n_train_trajectories: int = 0
    n_train_transitions: int = 0
    epoch_seconds: list = field(default_factory=list)  # wall clock; never serialized with the log

    def steps_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,lr,loss,grad_norm_pre,grad_norm_post\n")
        for s, lr, loss, pre, post in self.steps:
            buf.write(f"{s},{lr!r},{loss!r},{pre!r},{post!r}\n")
        return buf.getvalue()

    def jsonl(self) -> str:
        lines = [json.dumps({"kind": "step", "step": s, "lr": lr, "loss": loss,
                             "grad_norm_pre": pre, "grad_norm_post": post})
                 for s, lr, loss, pre, post in self.steps]
        lines += [json.dumps({"kind": "epoch", "epoch": e, "loss": l}) for e, l in self.epochs]
        lines += [json.dumps({"kind": "eval", **{k: v for k, v in ev.items() if k != "rollouts"}},
                             sort_keys=True) for ev in self.evals]
        return "\n".join(lines) + "\n"


Evaluator = Callable[[object, int, int], dict]


def _mlp_for(ds, config):
    cfg = MLPPolicyConfig(ds.meta.d_s, ds.meta.d_a, depth=config.mlp_depth, hidden=config.mlp_hidden)
    policy = MLPPolicy(cfg, seed=config.seed)
    return policy.set_state_stats(*state_stats(ds))


def default_rtg_scale(ds) -> float:
    return 1.0 if ds.meta.reward_regime == "sparse" else 1000.0


def _dt_for(ds, config):
    if config.context_K > ds.meta.max_episode_length:
        raise ConfigError(f"context_K {config.context_K} exceeds the dataset's "
                          f"max_episode_length {ds.meta.max_episode_length}")
    if config.dt_max_episode_length < ds.meta.max_episode_length:
        raise ConfigError(f"dt_max_episode_length {config.dt_max_episode_length} is shorter than the "
                          f"dataset's episodes ({ds.meta.max_episode_length})")
    cfg = DTPolicyConfig(
        ds.meta.d_s, ds.meta.d_a, context_K=config.context_K, layers=config.dt_layers,
        heads=config.dt_heads, embed_dim=config.dt_embed_dim, dropout=config.dt_dropout,
        max_episode_length=config.dt_max_episode_length,
        rtg_scale=config.rtg_scale or default_rtg_scale(ds), pos_encoding=config.dt_pos_encoding,
    )
    policy = DTPolicy(cfg, seed=config.seed)
    return policy.set_state_stats(*state_stats(ds))


def _optimizer_step(policy, loss_fn, opt, lr, clip, log, step, gbuf):
    params = policy.parameters()
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, params)
    tape.nodes.clear()
    policy.flat_grad(grads, out=gbuf)
    (g,), pre = clip_grad_norm([gbuf], clip, inplace=True)
    post = global_norm([g])
    adam_step([policy.flat], [g], opt, lr=lr)
    log.steps.append((step, lr, float(loss.data), pre, post))
    return float(loss.data)


def _adam_for(policy, config):
    opt = AdamState.for_params([policy.flat], lr=config.lr, weight_decay=config.weight_decay)
    return opt, np.empty_like(policy.flat)


def _maybe_eval(policy, evaluator, epoch, config, log, step):
    if evaluator is None or (epoch + 1) % config.eval_every_epochs:
        return
    result = dict(evaluator(policy, len(log.evals), epoch + 1))
    result.setdefault("epoch", epoch + 1)
    result["step"] = step
    prev_best = max((ev["score"] for ev in log.evals), default=-math.inf)
    log.evals.append(result)
    if result["score"] > prev_best:
        log.best_eval_params = policy.flat_params().copy()
        log.best_eval_step = step


def train_bc(ds: TrajectoryDataset, config: TrainConfig, evaluator: Optional[Evaluator] = None):
    """Mean-squared-error regression of dataset actions on states with an MLP."""
    if config.family != "bc" or config.filter is not None:
        raise ConfigError(f"train_bc needs method bc, got {config.method}")
    if len(ds) == 0:
        raise DataError("cannot train on an empty dataset")
    states, actions = stack_transitions(ds)
    n = states.shape[0]
    batch = config.effective_batch_size
    spe = math.ceil(n / batch)
    policy = _mlp_for(ds, config)
    opt, gbuf = _adam_for(policy, config)
    sampler = rngmod.stream(config.seed, "batches")
    log = TrainLog(steps_per_epoch=spe, n_train_trajectories=len(ds), n_train_transitions=n)
    step = 0
    for epoch in range(config.epochs):
        tick = time.perf_counter()
        losses = []
        for _ in range(spe):
            idx = sampler.integers(0, n, size=batch)
            s, a = states[idx], actions[idx]
            lr = lr_schedule(step, config.lr, "bc", steps_per_epoch=spe,
                             decay_epoch=config.lr_decay_epoch, decay_factor=config.lr_decay)
            losses.append(_optimizer_step(policy, lambda: mse_loss(policy.forward(s), a),
                                          opt, lr, config.grad_clip, log, step, gbuf))
            step += 1
        log.epochs.append((epoch + 1, float(np.mean(losses))))
        log.epoch_seconds.append(time.perf_counter() - tick)
        _maybe_eval(policy, evaluator, epoch, config, log, step)
    return policy, log


class WindowSampler:
    """Draws K-step windows ending at uniformly chosen transitions.

    Picking the window's last transition uniformly over the whole dataset is
    the same as picking a trajectory with probability proportional to its
    length and then a uniform offset. Windows that would start before the
    episode are left-padded with zeros and flagged invalid.
    """

    def __init__(self, ds: TrajectoryDataset, K: int):
        self.K = K
        self.states, self.actions = stack_transitions(ds)
        self.rtg = np.concatenate([returns_to_go(t) for t in ds.trajectories])
        self.timesteps = np.concatenate([np.arange(len(t)) for t in ds.trajectories])
        self.n = self.states.shape[0]

    def window(self, idx):
        """Windows ending at the global transition indices ``idx``."""
        offs = np.arange(-self.K + 1, 1)
        local = self.timesteps[idx][:, None] + offs
        valid = local >= 0
        g = np.where(valid, idx[:, None] + offs, 0)
        states = np.where(valid[..., None], self.states[g], 0.0)
        actions = np.where(valid[..., None], self.actions[g], 0.0)
        rtg = np.where(valid, self.rtg[g], 0.0)
        timesteps = np.where(valid, local, 0)
        return rtg, states, actions, timesteps, valid

    def sample(self, rng, batch):
        return self.window(rng.integers(0, self.n, size=batch))


def dt_loss(policy, rtg, states, actions, timesteps, valid, train=False, rng=None):
    pred = policy.forward(rtg, states, actions, timesteps, valid, train=train, rng=rng)
    return mse_loss(pred, actions, valid)


def train_dt(ds: TrajectoryDataset, config: TrainConfig, evaluator: Optional[Evaluator] = None):
    """Return-conditioned action prediction with a causal transformer."""
    if config.family != "dt" or config.filter is not None:
        raise ConfigError(f"train_dt needs method dt, got {config.method}")
    if len(ds) == 0:
        raise DataError("cannot train on an empty dataset")
    policy = _dt_for(ds, config)
    sampler = WindowSampler(ds, config.context_K)
    batch = config.effective_batch_size
    spe = math.ceil(sampler.n / batch)
    opt, gbuf = _adam_for(policy, config)
    batches = rngmod.stream(config.seed, "batches")
    drop = rngmod.stream(config.seed, "dropout")
    log = TrainLog(steps_per_epoch=spe, n_train_trajectories=len(ds), n_train_transitions=sampler.n)
    step = 0
    for epoch in range(config.epochs):
        tick = time.perf_counter()
        losses = []
        for _ in range(spe):
            win = sampler.sample(batches, batch)
            lr = lr_schedule(step, config.lr, "dt", warmup_steps=config.warmup_steps)
            losses.append(_optimizer_step(policy, lambda: dt_loss(policy, *win, train=True, rng=drop),
                                          opt, lr, config.grad_clip, log, step, gbuf))
            step += 1
        log.epochs.append((epoch + 1, float(np.mean(losses))))
        log.epoch_seconds.append(time.perf_counter() - tick)
        _maybe_eval(policy, evaluator, epoch, config, log, step)
    return policy, log


def train_fbc(ds, config: TrainConfig, evaluator: Optional[Evaluator] = None):
    if config.method != "fbc":
        raise ConfigError(f"train_fbc needs method fbc, got {config.method}")
    return train_bc(apply_filter(ds, config.filter), config.base(), evaluator)


def train_fdt(ds, config: TrainConfig, evaluator: Optional[Evaluator] = None):
    if config.method != "fdt":
        raise ConfigError(f"train_fdt needs method fdt, got {config.method}")
    return train_dt(apply_filter(ds, config.filter), config.base(), evaluator)


TRAINERS = {"bc": train_bc, "fbc": train_fbc, "dt": train_dt, "fdt": train_fdt}


def train(ds, config: TrainConfig, evaluator: Optional[Evaluator] = None):
    return TRAINERS[config.method](ds, config, evaluator)


def training_dataset(ds, config: TrainConfig):
    """The dataset the method actually trains on (filtered for FBC/FDT)."""
    return apply_filter(ds, config.filter) if config.filter is not None else ds


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
