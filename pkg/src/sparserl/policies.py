"""MLP and causal-transformer policies built on :mod:`sparserl.tensor`.

Both policies keep their trainable arrays in an ordered ``params`` dict, so a
checkpoint is just a config header plus the arrays flattened in that order.
States are standardised with fixed (non-trainable) statistics taken from the
training data.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DatasetFormatError, DimensionError
from .tensor import (Tensor, dropout, layer_norm, linear, matmul, relu, softmax,
                     stack, transpose)


@dataclass(frozen=True)
class MLPPolicyConfig:
    d_s: int
    d_a: int
    depth: int = 2
    hidden: int = 512
    activation: str = "relu"

    def __post_init__(self):
        problems = []
        if self.d_s < 1 or self.d_a < 1:
            problems.append(f"d_s and d_a must be >= 1, got {self.d_s}, {self.d_a}")
        if self.depth < 0:
            problems.append(f"depth must be >= 0, got {self.depth}")
        if self.hidden < 1:
            problems.append(f"hidden must be >= 1, got {self.hidden}")
        if self.activation != "relu":
            problems.append(f"only relu activation is supported, got {self.activation!r}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class DTPolicyConfig:
    d_s: int
    d_a: int
    context_K: int = 20
    layers: int = 3
    heads: int = 1
    embed_dim: int = 128
    dropout: float = 0.1
    max_episode_length: int = 1000
    rtg_scale: float = 1.0
    pos_encoding: str = "sinusoidal"

    def __post_init__(self):
        problems = []
        if self.d_s < 1 or self.d_a < 1:
            problems.append(f"d_s and d_a must be >= 1, got {self.d_s}, {self.d_a}")
        if self.heads < 1 or self.embed_dim % self.heads:
            problems.append(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if self.embed_dim % 2:
            problems.append(f"embed_dim must be even for sinusoidal encodings, got {self.embed_dim}")
        if self.context_K < 1:
            problems.append(f"context_K must be >= 1, got {self.context_K}")
        if self.context_K > self.max_episode_length:
            problems.append(f"context_K {self.context_K} exceeds max_episode_length {self.max_episode_length}")
        if not (0.0 <= self.dropout < 1.0):
            problems.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.layers < 1:
            problems.append(f"layers must be >= 1, got {self.layers}")
        if self.rtg_scale <= 0:
            problems.append(f"rtg_scale must be > 0, got {self.rtg_scale}")
        if self.pos_encoding not in ("sinusoidal", "learned"):
            problems.append(f"pos_encoding must be 'sinusoidal' or 'learned', got {self.pos_encoding!r}")
        if problems:
            raise ConfigError(problems)


def _param(shape, data=None):
    return Tensor(np.zeros(shape) if data is None else data, requires_grad=True)


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class _Policy:
    kind = ""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.state_mean = np.zeros(config.d_s)
        self.state_std = np.ones(config.d_s)

    def parameters(self):
        return list(self.params.values())

    def _pack(self):
        """Move every parameter into one contiguous buffer; tensors become views of it."""
        self.flat = np.concatenate([p.data.ravel() for p in self.params.values()])
        pos = 0
        for p in self.params.values():
            n = p.data.size
            p.data = self.flat[pos:pos + n].reshape(p.data.shape)
            pos += n

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_state_stats(self, mean, std):
        self.state_mean = np.array(mean, dtype=np.float64).reshape(self.config.d_s)
        self.state_std = np.array(std, dtype=np.float64).reshape(self.config.d_s)
        return self

    def _norm(self, states):
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.config.d_s:
            raise DimensionError(f"expected states with {self.config.d_s} features, got {states.shape}")
        return (states - self.state_mean) / self.state_std

    def flat_params(self) -> np.ndarray:
        return self.flat.copy()

    def load_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count():
            raise DimensionError(f"expected {self.param_count()} parameters, got {flat.size}")
        self.flat[...] = flat.reshape(-1)
        return self

    def flat_grad(self, grads, out=None):
        return np.concatenate([g.ravel() for g in grads], out=out)


# ---------------------------------------------------------------------------
# MLP


class MLPPolicy(_Policy):
    """Deterministic state -> action regressor with ReLU hidden layers and a linear head."""

    kind = "mlp"

    def __init__(self, config: MLPPolicyConfig, seed=0):
        super().__init__(config, seed)
        rng = rngmod.stream(seed, "init", "mlp")
        dims = [config.d_s] + [config.hidden] * config.depth + [config.d_a]
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(n_in)
            self.params[f"l{i}.w"] = _param((n_in, n_out), rng.uniform(-bound, bound, (n_in, n_out)))
            self.params[f"l{i}.b"] = _param((n_out,))
        self.n_layers = len(dims) - 1
        self._pack()

    def forward(self, states, train=False, rng=None) -> Tensor:
        h = Tensor(self._norm(states))
        for i in range(self.n_layers):
            h = linear(h, self.params[f"l{i}.w"], self.params[f"l{i}.b"])
            if i < self.n_layers - 1:
                h = relu(h)
        return h

    def act(self, states) -> np.ndarray:
        return self.forward(states).data


def mlp_param_formula(d_s, d_a, depth=2, hidden=512) -> int:
    """Closed form: one weight matrix plus bias per layer."""
    if depth == 0:
        return d_s * d_a + d_a
    return (d_s * hidden + hidden) + (depth - 1) * (hidden * hidden + hidden) + (hidden * d_a + d_a)


def mlp_forward(policy: MLPPolicy, state) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    out = policy.act(state[None] if single else state)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Decision transformer


def sinusoidal_pe(position, dim) -> np.ndarray:
    """Interleaved encoding: ``pe[2i] = sin(pos / 10000**(2i/dim))``, ``pe[2i+1]`` the cosine."""
    if dim % 2:
        raise ValueError(f"positional encoding dimension must be even, got {dim}")
    pos = np.asarray(position, dtype=np.float64)[..., None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos * freq
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def dt_param_formula(d_s, d_a, layers=3, embed_dim=128, learned_positions=0) -> int:
    """Closed form for :class:`DTPolicy`.

    Per-modality embeddings ``(1 + d_s + d_a) * E + 3E``; each block has two
    layer norms (4E), fused qkv (3E^2 + 3E), output projection (E^2 + E) and a
    4E-wide feed-forward (8E^2 + 5E), i.e. ``12E^2 + 13E``; then the final
    layer norm (2E) and the action head (E * d_a + d_a). Learned positions add
    ``max_episode_length * E``. Head count does not change the total.
    """
    E = embed_dim
    embeds = (1 + d_s + d_a) * E + 3 * E
    block = 12 * E * E + 13 * E
    return embeds + layers * block + 2 * E + E * d_a + d_a + learned_positions * E


class DTPolicy(_Policy):
    """Causal transformer over interleaved (return-to-go, state, action) tokens.

    The last action token of a window is never fed in: no prediction may
    depend on it, so dropping it changes nothing and saves a third of the work
    when K = 1.
    """

    kind = "dt"

    def __init__(self, config: DTPolicyConfig, seed=0):
        super().__init__(config, seed)
        rng = rngmod.stream(seed, "init", "dt")
        E = config.embed_dim
        p = self.params
        for name, n_in in (("rtg", 1), ("state", config.d_s), ("action", config.d_a)):
            p[f"embed_{name}.w"] = _param((n_in, E), _trunc_normal(rng, (n_in, E)))
            p[f"embed_{name}.b"] = _param((E,))
        if config.pos_encoding == "learned":
            p["embed_time"] = _param((config.max_episode_length, E),
                                     _trunc_normal(rng, (config.max_episode_length, E)))
        for i in range(config.layers):
            p[f"b{i}.ln1.scale"] = _param((E,), np.ones(E))
            p[f"b{i}.ln1.shift"] = _param((E,))
            p[f"b{i}.qkv.w"] = _param((E, 3 * E), _trunc_normal(rng, (E, 3 * E)))
            p[f"b{i}.qkv.b"] = _param((3 * E,))
            p[f"b{i}.proj.w"] = _param((E, E), _trunc_normal(rng, (E, E)))
            p[f"b{i}.proj.b"] = _param((E,))
            p[f"b{i}.ln2.scale"] = _param((E,), np.ones(E))
            p[f"b{i}.ln2.shift"] = _param((E,))
            p[f"b{i}.fc.w"] = _param((E, 4 * E), _trunc_normal(rng, (E, 4 * E)))
            p[f"b{i}.fc.b"] = _param((4 * E,))
            p[f"b{i}.fc_out.w"] = _param((4 * E, E), _trunc_normal(rng, (4 * E, E)))
            p[f"b{i}.fc_out.b"] = _param((E,))
        p["ln_f.scale"] = _param((E,), np.ones(E))
        p["ln_f.shift"] = _param((E,))
        p["head.w"] = _param((E, config.d_a), _trunc_normal(rng, (E, config.d_a)))
        p["head.b"] = _param((config.d_a,))
        self._pe = sinusoidal_pe(np.arange(config.max_episode_length), E)
        self._pack()

    def _attention(self, x, i, mask, train, rng):
        cfg = self.config
        B, T, E = x.shape
        H = cfg.heads
        dh = E // H
        qkv = linear(x, self.params[f"b{i}.qkv.w"], self.params[f"b{i}.qkv.b"])
        qkv = transpose(qkv.reshape(B, T, 3, H, dh), (2, 0, 3, 1, 4))  # 3, B, H, T, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(dh))
        att = softmax(scores, mask=mask)
        att = dropout(att, cfg.dropout, rng, train)
        y = transpose(matmul(att, v), (0, 2, 1, 3)).reshape(B, T, E)
        y = linear(y, self.params[f"b{i}.proj.w"], self.params[f"b{i}.proj.b"])
        return dropout(y, cfg.dropout, rng, train)

    def forward(self, rtg, states, actions, timesteps, valid=None, train=False, rng=None) -> Tensor:
        """Action predictions at every state token, shape (B, K, d_a).

        ``rtg`` (B, K), ``states`` (B, K, d_s), ``actions`` (B, K, d_a),
        ``timesteps`` (B, K) ints; ``valid`` (B, K) marks real (non-padding) steps.
        """
        cfg = self.config
        rtg = np.asarray(rtg, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        timesteps = np.asarray(timesteps)
        if rtg.ndim != 2:
            raise DimensionError(f"rtg must be (B, K), got {rtg.shape}")
        B, K = rtg.shape
        if K > cfg.context_K:
            raise DimensionError(f"window of {K} steps exceeds context length {cfg.context_K}")
        if actions.shape != (B, K, cfg.d_a):
            raise DimensionError(f"actions must be {(B, K, cfg.d_a)}, got {actions.shape}")
        if np.any(timesteps < 0) or np.any(timesteps >= cfg.max_episode_length):
            raise DimensionError(f"timesteps must lie in [0, {cfg.max_episode_length})")
        if valid is None:
            valid = np.ones((B, K), dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if train and rng is None:
            raise ValueError("training-mode forward needs a dropout rng")
        p = self.params
        s = Tensor(self._norm(states))

        if cfg.pos_encoding == "learned":
            pos = p["embed_time"][timesteps]
        else:
            pos = Tensor(self._pe[timesteps])
        r_tok = linear(Tensor(rtg[..., None] / cfg.rtg_scale), p["embed_rtg.w"], p["embed_rtg.b"]) + pos
        s_tok = linear(s, p["embed_state.w"], p["embed_state.b"]) + pos
        a_tok = linear(Tensor(actions), p["embed_action.w"], p["embed_action.b"]) + pos
        T = 3 * K - 1
        x = stack([r_tok, s_tok, a_tok], axis=2).reshape(B, 3 * K, cfg.embed_dim)[:, :T]
        x = dropout(x, cfg.dropout, rng, train)

        tok_valid = np.repeat(valid, 3, axis=1)[:, :T]
        causal = np.tril(np.ones((T, T), dtype=bool))
        mask = causal[None] & tok_valid[:, None, :]
        mask |= np.eye(T, dtype=bool)[None]  # padded queries attend to themselves only
        mask = mask[:, None]  # broadcast over heads

        for i in range(cfg.layers):
            h = layer_norm(x, p[f"b{i}.ln1.scale"], p[f"b{i}.ln1.shift"])
            x = x + self._attention(h, i, mask, train, rng)
            h = layer_norm(x, p[f"b{i}.ln2.scale"], p[f"b{i}.ln2.shift"])
            h = relu(linear(h, p[f"b{i}.fc.w"], p[f"b{i}.fc.b"]))
            h = linear(h, p[f"b{i}.fc_out.w"], p[f"b{i}.fc_out.b"])
            x = x + dropout(h, cfg.dropout, rng, train)
        x = layer_norm(x, p["ln_f.scale"], p["ln_f.shift"])
        state_tokens = x[:, 1::3]
        return linear(state_tokens, p["head.w"], p["head.b"])


def dt_forward(policy: DTPolicy, window, train=False, rng=None) -> np.ndarray:
    """Predicted actions for a :class:`ContextWindow` (all steps if training, else the last)."""
    pred = policy.forward(window.rtg[None], window.states[None], window.actions[None],
                          window.timesteps[None], None, train, rng).data[0]
    return pred if train else pred[-1]


@dataclass
class ContextWindow:
    """Up to K consecutive (R, s, a) triplets with their episode timesteps.

    At inference the action in the final slot is unknown; whatever it holds
    is ignored by the model.
    """

    rtg: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray

    def __post_init__(self):
        self.rtg = np.asarray(self.rtg, dtype=np.float64).reshape(-1)
        K = self.rtg.shape[0]
        self.states = np.asarray(self.states, dtype=np.float64).reshape(K, -1)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(K, -1)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64).reshape(K)
        if K < 1:
            raise DimensionError("context window is empty")
        if np.any(np.diff(self.timesteps) <= 0):
            raise DimensionError("context window timesteps must be strictly increasing")
        if not np.all(np.isfinite(self.rtg)):
            raise DimensionError("non-finite return-to-go in context window")


# ---------------------------------------------------------------------------
# construction and checkpoints


def build_policy(kind, config_dict, seed=0):
    if kind == "mlp":
        return MLPPolicy(MLPPolicyConfig(**config_dict), seed)
    if kind == "dt":
        return DTPolicy(DTPolicyConfig(**config_dict), seed)
    raise ConfigError(f"unknown policy kind {kind!r}")


def param_count(policy) -> int:
    return policy.param_count()


CKPT_MAGIC = b"SRLCKPT\0"


def checkpoint_bytes(policy, step: int = 0, extra: Optional[dict] = None) -> bytes:
    header = {
        "kind": policy.kind,
        "config": asdict(policy.config),
        "seed": policy.seed,
        "step": int(step),
        "state_mean": policy.state_mean.tolist(),
        "state_std": policy.state_std.tolist(),
        "n_params": policy.param_count(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(head)) + head + policy.flat_params().astype("<f8").tobytes()


def save_checkpoint(policy, path, step: int = 0, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(policy, step, extra))


def load_checkpoint(path):
    """Returns ``(policy, header)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC) or len(raw) < len(CKPT_MAGIC) + 4:
        raise DatasetFormatError(f"{path}: not a policy checkpoint")
    (n,) = struct.unpack_from("<I", raw, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 4
    try:
        header = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: corrupt checkpoint header: {exc}") from None
    policy = build_policy(header["kind"], header["config"], header["seed"])
    payload = raw[start + n:]
    if len(payload) != 8 * policy.param_count():
        raise DatasetFormatError(f"{path}: parameter payload has {len(payload)} bytes, "
                                 f"expected {8 * policy.param_count()}")
    policy.load_flat(np.frombuffer(payload, dtype="<f8"))
    policy.set_state_stats(header["state_mean"], header["state_std"])
    return policy, header
