"""Trajectory data model, return bookkeeping and the ``.traj`` interchange format.

Binary layout (little endian), one header then ``N`` records::

    header : magic b"SRLTRAJ\\0" | version u16 | len(env_name) u16 | env_name utf-8
             | d_s u32 | d_a u32 | max_episode_length u32 | reward_regime u8 | N u32
    record : T u32 | states f64[T*d_s] | actions f64[T*d_a] | rewards f64[T]
             | success u8 (0 = false, 1 = true, 255 = absent)

The text variant is JSON lines: a header object followed by one object per
trajectory with ``states``, ``actions``, ``rewards`` and ``success`` keys.
Floats are written with ``repr`` so text files round-trip bit-exactly as well.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .errors import DatasetFormatError, DimensionError, TruncatedRecordError

MAGIC = b"SRLTRAJ\0"
FORMAT_VERSION = 1
REGIMES = ("dense", "sparse", "sparsified")
_SUCCESS_CODES = {False: 0, True: 1, None: 255}
_SUCCESS_VALUES = {v: k for k, v in _SUCCESS_CODES.items()}


def _frozen(a, ndim):
    arr = np.array(a, dtype=np.float64, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode: ``states`` (T, d_s), ``actions`` (T, d_a), ``rewards`` (T,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    success: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, 2))
        object.__setattr__(self, "actions", _frozen(self.actions, 2))
        object.__setattr__(self, "rewards", _frozen(self.rewards, 1))
        if self.success is not None:
            object.__setattr__(self, "success", bool(self.success))
        T = self.rewards.shape[0]
        if self.rewards.ndim != 1 or T < 1:
            raise DimensionError("trajectory must contain at least one transition")
        if self.states.shape[0] != T or self.actions.shape[0] != T:
            raise DimensionError(
                f"length mismatch: {self.states.shape[0]} states, "
                f"{self.actions.shape[0]} actions, {T} rewards"
            )
        for name in ("states", "actions", "rewards"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DimensionError(f"non-finite value in {name}")

    @classmethod
    def from_transitions(cls, transitions: Iterable[Transition], success=None):
        transitions = list(transitions)
        if not transitions:
            raise DimensionError("trajectory must contain at least one transition")
        return cls(
            states=np.stack([np.atleast_1d(t.state) for t in transitions]),
            actions=np.stack([np.atleast_1d(t.action) for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            success=success,
        )

    def __len__(self):
        return int(self.rewards.shape[0])

    def __iter__(self):
        for s, a, r in zip(self.states, self.actions, self.rewards):
            yield Transition(s, a, float(r))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.success == other.success
            and _bits_equal(self.states, other.states)
            and _bits_equal(self.actions, other.actions)
            and _bits_equal(self.rewards, other.rewards)
        )

    __hash__ = None

    @property
    def final_reward(self) -> float:
        return float(self.rewards[-1])

    def replace(self, **changes) -> "Trajectory":
        fields = dict(states=self.states, actions=self.actions, rewards=self.rewards, success=self.success)
        fields.update(changes)
        return Trajectory(**fields)


def _bits_equal(a, b):
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class DatasetMeta:
    env_name: str
    d_s: int
    d_a: int
    max_episode_length: int
    reward_regime: str

    def __post_init__(self):
        if self.d_s < 1:
            raise DimensionError(f"d_s must be >= 1, got {self.d_s}")
        if self.d_a < 1:
            raise DimensionError(f"d_a must be >= 1, got {self.d_a}")
        if self.max_episode_length < 1:
            raise DimensionError(f"max_episode_length must be >= 1, got {self.max_episode_length}")
        if self.reward_regime not in REGIMES:
            raise DatasetFormatError(f"unknown reward regime {self.reward_regime!r}")

    def replace(self, **changes) -> "DatasetMeta":
        d = self.__dict__.copy()
        d.update(changes)
        return DatasetMeta(**d)


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    trajectories: tuple
    meta: DatasetMeta

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if not trajs:
            raise DimensionError("dataset must contain at least one trajectory")
        m = self.meta
        for i, tr in enumerate(trajs):
            if tr.states.shape[1] != m.d_s or tr.actions.shape[1] != m.d_a:
                raise DimensionError(
                    f"trajectory {i}: state/action dims {tr.states.shape[1]}/{tr.actions.shape[1]} "
                    f"do not match dataset dims {m.d_s}/{m.d_a}"
                )
            if len(tr) > m.max_episode_length:
                raise DimensionError(
                    f"trajectory {i}: length {len(tr)} exceeds max_episode_length {m.max_episode_length}"
                )
            if m.reward_regime == "sparse" and tr.success is not None:
                expected = 1.0 if tr.success else 0.0
                if tr.rewards[-1] != expected:
                    raise DatasetFormatError(
                        f"trajectory {i}: success={tr.success} but terminal reward is {tr.rewards[-1]}"
                    )

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return self.meta == other.meta and len(self) == len(other) and all(
            a == b for a, b in zip(self.trajectories, other.trajectories)
        )

    __hash__ = None

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def success_count(self) -> int:
        return sum(1 for t in self.trajectories if t.success)

    def with_trajectories(self, trajectories, **meta_changes) -> "TrajectoryDataset":
        meta = self.meta.replace(**meta_changes) if meta_changes else self.meta
        return TrajectoryDataset(tuple(trajectories), meta)


def total_return(traj: Trajectory) -> float:
    """Undiscounted sum of rewards.

    Accumulated back to front so that it is bit-identical to
    ``returns_to_go(traj)[0]``.
    """
    return float(returns_to_go(traj)[0])


def returns_to_go(traj: Trajectory) -> np.ndarray:
    r = traj.rewards
    out = np.empty_like(r)
    acc = 0.0
    for j in range(len(r) - 1, -1, -1):
        acc = r[j] + acc
        out[j] = acc
    return out


# ---------------------------------------------------------------------------
# Interchange format

_HEAD = struct.Struct("<IIIBI")


def dumps(ds: TrajectoryDataset) -> bytes:
    m = ds.meta
    name = m.env_name.encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", FORMAT_VERSION, len(name)))
    buf.write(name)
    buf.write(_HEAD.pack(m.d_s, m.d_a, m.max_episode_length, REGIMES.index(m.reward_regime), len(ds)))
    for tr in ds.trajectories:
        buf.write(struct.pack("<I", len(tr)))
        buf.write(np.ascontiguousarray(tr.states, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(tr.actions, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(tr.rewards, dtype="<f8").tobytes())
        buf.write(bytes([_SUCCESS_CODES[tr.success]]))
    return buf.getvalue()


def loads(raw: bytes) -> TrajectoryDataset:
    if not raw.startswith(MAGIC):
        raise DatasetFormatError("malformed header: bad magic bytes")
    view = memoryview(raw)
    pos = len(MAGIC)
    try:
        version, name_len = struct.unpack_from("<HH", view, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"malformed header: unsupported format version {version}")
        env_name = bytes(view[pos:pos + name_len]).decode("utf-8")
        if len(env_name.encode("utf-8")) != name_len:
            raise struct.error("short env name")
        pos += name_len
        d_s, d_a, max_len, regime_code, n = _HEAD.unpack_from(view, pos)
        pos += _HEAD.size
    except (struct.error, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"malformed header: {exc}") from None
    if regime_code >= len(REGIMES):
        raise DatasetFormatError(f"malformed header: unknown reward regime code {regime_code}")
    meta = DatasetMeta(env_name, d_s, d_a, max_len, REGIMES[regime_code])

    trajs = []
    for rec in range(1, n + 1):
        if pos + 4 > len(raw):
            raise TruncatedRecordError(rec)
        (T,) = struct.unpack_from("<I", view, pos)
        pos += 4
        if T < 1 or T > max_len:
            raise DimensionError(f"record {rec}: length {T} outside [1, {max_len}]")
        sizes = (T * d_s, T * d_a, T)
        end = pos + 8 * sum(sizes) + 1
        if end > len(raw):
            raise TruncatedRecordError(rec)
        arrays = []
        for size in sizes:
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64))
            pos += 8 * size
        code = raw[pos]
        pos += 1
        if code not in _SUCCESS_VALUES:
            raise DatasetFormatError(f"record {rec}: invalid success byte {code}")
        try:
            trajs.append(Trajectory(arrays[0].reshape(T, d_s), arrays[1].reshape(T, d_a), arrays[2],
                                    _SUCCESS_VALUES[code]))
        except DimensionError as exc:
            raise DimensionError(f"record {rec}: {exc}") from None
    if pos != len(raw):
        raise DatasetFormatError(f"{len(raw) - pos} trailing bytes after record {n}")
    return TrajectoryDataset(tuple(trajs), meta)


def dumps_text(ds: TrajectoryDataset) -> str:
    m = ds.meta
    lines = [json.dumps({
        "format": "sparserl-traj", "version": FORMAT_VERSION, "env_name": m.env_name,
        "d_s": m.d_s, "d_a": m.d_a, "max_episode_length": m.max_episode_length,
        "reward_regime": m.reward_regime, "N": len(ds),
    })]
    for tr in ds.trajectories:
        lines.append(json.dumps({
            "states": tr.states.tolist(), "actions": tr.actions.tolist(),
            "rewards": tr.rewards.tolist(), "success": tr.success,
        }))
    return "\n".join(lines) + "\n"


_HEADER_KEYS = ("env_name", "d_s", "d_a", "max_episode_length", "reward_regime", "N")


def loads_text(text: str) -> TrajectoryDataset:
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise DatasetFormatError("malformed header: empty file")
    lineno, first = lines[0]
    try:
        head = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line {lineno}: malformed header: {exc}") from None
    missing = [k for k in _HEADER_KEYS if k not in head]
    if not isinstance(head, dict) or missing:
        raise DatasetFormatError(f"line {lineno}: malformed header, missing {missing}")
    meta = DatasetMeta(head["env_name"], int(head["d_s"]), int(head["d_a"]),
                       int(head["max_episode_length"]), head["reward_regime"])
    n = int(head["N"])
    body = lines[1:]
    if len(body) > n:
        raise DatasetFormatError(f"line {body[n][0]}: more records than the declared N={n}")
    trajs = []
    for rec, (lineno, ln) in enumerate(body, start=1):
        try:
            obj = json.loads(ln)
            states = np.asarray(obj["states"], dtype=np.float64).reshape(-1, meta.d_s)
            actions = np.asarray(obj["actions"], dtype=np.float64).reshape(-1, meta.d_a)
            trajs.append(Trajectory(states, actions, obj["rewards"], obj.get("success")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {lineno} (record {rec}): {exc}") from None
    if len(trajs) < n:
        raise TruncatedRecordError(len(trajs) + 1)
    try:
        return TrajectoryDataset(tuple(trajs), meta)
    except DimensionError as exc:
        raise DimensionError(f"{exc}") from None


def save_dataset(ds: TrajectoryDataset, path, text: Optional[bool] = None) -> None:
    """Write ``ds``; text form for ``.jsonl``/``.txt`` suffixes unless overridden."""
    path = Path(path)
    if text is None:
        text = path.suffix in (".jsonl", ".txt", ".json")
    if text:
        path.write_text(dumps_text(ds))
    else:
        path.write_bytes(dumps(ds))


def load_dataset(path) -> TrajectoryDataset:
    raw = Path(path).read_bytes()
    if raw.startswith(MAGIC):
        return loads(raw)
    if raw.lstrip().startswith(b"{"):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError(f"malformed header: {exc}") from None
        return loads_text(text)
    raise DatasetFormatError("malformed header: neither binary magic nor a JSON header line")


def content_hash(ds: TrajectoryDataset) -> str:
    return hashlib.sha256(dumps(ds)).hexdigest()


def stack_transitions(ds: TrajectoryDataset):
    """All (state, action) pairs of ``ds`` as two contiguous arrays."""
    states = np.concatenate([t.states for t in ds.trajectories])
    actions = np.concatenate([t.actions for t in ds.trajectories])
    return states, actions


def state_stats(ds: TrajectoryDataset, eps: float = 1e-6):
    states, _ = stack_transitions(ds)
    return states.mean(axis=0), states.std(axis=0) + eps
