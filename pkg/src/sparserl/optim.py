"""Adam with decoupled weight decay, global-norm clipping and the two lr schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads, max_norm=0.25, inplace=False):
    """Scale all gradients by ``max_norm / g`` when their joint L2 norm ``g`` exceeds it.

    Returns ``(clipped, norm_before)``.
    """
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    factor = max_norm / norm
    if inplace:
        for g in grads:
            g *= factor
        return list(grads), norm
    return [g * factor for g in grads], norm


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    scratch: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def _adam_update(p, g, m, v, state, lr, c1, c2):
    # reused scratch buffers: fresh large temporaries cost more than the arithmetic
    key = (id(m), p.shape)
    if key not in state.scratch:
        state.scratch[key] = (np.empty(p.shape), np.empty(p.shape))
    tmp, den = state.scratch[key]
    b1, b2 = state.beta1, state.beta2
    if state.weight_decay:
        np.multiply(p, lr * state.weight_decay, out=tmp)
        p -= tmp
    m *= b1
    np.multiply(g, 1.0 - b1, out=tmp)
    m += tmp
    v *= b2
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - b2
    v += tmp
    np.divide(v, c2, out=den)
    np.sqrt(den, out=den)
    den += state.eps
    np.divide(m, c1, out=tmp)
    tmp /= den
    tmp *= lr
    p -= tmp


def adam_step(params, grads, state: AdamState, lr=None):
    """One in-place AdamW update of the numpy arrays in ``params``.

    Decay is decoupled and applied first: ``theta -= lr * wd * theta``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    lr = state.lr if lr is None else lr
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: parameter {p.shape} vs gradient {g.shape}")
        _adam_update(p, g, m, v, state, lr, c1, c2)
    return params, state


def lr_schedule(step, base_lr=1e-4, mode="dt", warmup_steps=100_000,
                steps_per_epoch=1, decay_epoch=80, decay_factor=0.1):
    """Learning rate at optimizer step ``step`` (0-based).

    ``dt``: linear warmup, ``base_lr * min(1, (step + 1) / warmup_steps)``.
    ``bc``: ``base_lr`` until epoch ``decay_epoch``, then ``base_lr * decay_factor``.
    ``constant``: ``base_lr``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if mode == "dt":
        return base_lr * min(1.0, (step + 1) / warmup_steps)
    if mode == "bc":
        epoch = step // max(1, steps_per_epoch)
        return base_lr * decay_factor if epoch >= decay_epoch else base_lr
    if mode == "constant":
        return base_lr
    raise ValueError(f"unknown lr schedule mode {mode!r}")
