"""Reward-regime constructions and trajectory filters.

``sparsify`` and ``label_sparse`` turn a dataset into the two sparse forms;
``filter_successful`` and ``filter_top_fraction`` keep the high-performing
trajectories that FBC and FDT train on. Inputs are never mutated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import TrajectoryDataset, total_return
from .errors import ConfigError, DataError, EmptyFilterError, RegimeError

FILTER_MODES = ("success", "top_fraction")


@dataclass(frozen=True)
class FilterSpec:
    mode: str = "top_fraction"
    fraction: float = 0.10

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise ConfigError(f"filter mode must be one of {FILTER_MODES}, got {self.mode!r}")
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError(f"filter fraction must lie in (0, 1], got {self.fraction}")


def _require_regime(ds, regime, op):
    if ds.meta.reward_regime != regime:
        raise RegimeError(f"{op} needs a {regime} dataset, got {ds.meta.reward_regime}")


def sparsify(ds: TrajectoryDataset) -> TrajectoryDataset:
    """Move each trajectory's whole return onto its last step."""
    _require_regime(ds, "dense", "sparsify")
    out = []
    for tr in ds.trajectories:
        r = np.zeros_like(tr.rewards)
        r[-1] = total_return(tr)
        out.append(tr.replace(rewards=r))
    return ds.with_trajectories(out, reward_regime="sparsified")


def label_sparse(ds: TrajectoryDataset, success_flags: Sequence[bool]) -> TrajectoryDataset:
    """Binary terminal reward: 1 on the last step of flagged trajectories, 0 elsewhere."""
    flags = [bool(f) for f in success_flags]
    if len(flags) != len(ds):
        raise DataError(f"got {len(flags)} success flags for {len(ds)} trajectories")
    out = []
    for tr, ok in zip(ds.trajectories, flags):
        r = np.zeros_like(tr.rewards)
        r[-1] = 1.0 if ok else 0.0
        out.append(tr.replace(rewards=r, success=ok))
    return ds.with_trajectories(out, reward_regime="sparse")


def filter_successful(ds: TrajectoryDataset) -> TrajectoryDataset:
    _require_regime(ds, "sparse", "filter_successful")
    missing = [i for i, tr in enumerate(ds.trajectories) if tr.success is None]
    if missing:
        raise DataError(f"{len(missing)} trajectories lack a success flag (first: {missing[0]})")
    kept = [tr for tr in ds.trajectories if tr.success]
    if not kept:
        raise EmptyFilterError(
            f"success filter kept 0 of {len(ds)} trajectories; nothing to train on"
        )
    return ds.with_trajectories(kept)


def top_fraction_count(n: int, fraction: float) -> int:
    # decimal-exact so that e.g. 0.7 * 10 keeps 7, not 8
    return max(1, math.ceil(Fraction(repr(float(fraction))) * n))


def filter_top_fraction(ds: TrajectoryDataset, spec: FilterSpec = FilterSpec()) -> TrajectoryDataset:
    """Keep the ceil(fraction * N) trajectories with the largest final reward.

    Ties go to the smaller original index; survivors keep their original order.
    """
    _require_regime(ds, "sparsified", "filter_top_fraction")
    n = len(ds)
    k = top_fraction_count(n, spec.fraction)
    finals = [tr.final_reward for tr in ds.trajectories]
    ranked = sorted(range(n), key=lambda i: (-finals[i], i))
    keep = sorted(ranked[:k])
    return ds.with_trajectories([ds.trajectories[i] for i in keep])


def apply_filter(ds: TrajectoryDataset, spec: FilterSpec) -> TrajectoryDataset:
    if spec.mode == "success":
        return filter_successful(ds)
    return filter_top_fraction(ds, spec)
