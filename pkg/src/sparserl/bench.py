"""Benchmark runner: methods x datasets x seeds, aggregation and the report bundle.

Bundle layout (all files except ``timing.json`` are byte-for-byte
reproducible from the config, whatever the degree of parallelism)::

    manifest.json          resolved configs, seeds, dataset hashes, arm status
    arms/<arm>.json        per-seed evaluation records
    summary.json/.csv/.txt aggregated tables
    curves/<ds>__<m>.csv   epoch, mean, std, best
    plots/<ds>.svg         learning curves, mean +- std over seeds
    timing.json            wall clock per arm and per epoch
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import DatasetConfig, ExperimentConfig
from .data import TrajectoryDataset, content_hash, load_dataset, total_return
from .envs import generate_dataset, make_env
from .errors import DataError, RegimeError
from .evaluation import evaluate_policy
from .policies import param_count
from .rewards import apply_filter, sparsify
from .training import config_to_dict, train

HEADLINE = {"sparse": "best", "sparsified": "final"}


def build_dataset(dcfg: DatasetConfig) -> TrajectoryDataset:
    if dcfg.path is not None:
        ds = load_dataset(dcfg.path)
        if ds.meta.env_name != dcfg.env:
            raise DataError(f"{dcfg.path} holds {ds.meta.env_name} data, config says {dcfg.env}")
    else:
        env = make_env(dcfg.env, "sparse" if dcfg.regime == "sparse" else "dense")
        ds = generate_dataset(env, dcfg.mixture, dcfg.seed)
    if dcfg.regime == "sparsified" and ds.meta.reward_regime == "dense":
        ds = sparsify(ds)
    if ds.meta.reward_regime != dcfg.regime:
        raise RegimeError(f"dataset {dcfg.name} is {ds.meta.reward_regime}, config says {dcfg.regime}")
    return ds


def rtg_target_for(dcfg: DatasetConfig, ds: TrajectoryDataset) -> float:
    """Explicit target if configured; 1 for sparse data, else the best return in the data."""
    if dcfg.rtg_target is not None:
        return float(dcfg.rtg_target)
    if dcfg.regime == "sparse":
        return 1.0
    return max(total_return(t) for t in ds.trajectories)


def arm_id(method, dataset, seed) -> str:
    return f"{dataset}__{method}__s{seed}"


def run_arm(cfg: ExperimentConfig, method, dcfg: DatasetConfig, seed, ds: TrajectoryDataset) -> dict:
    """Train and evaluate one arm; failures are captured, never raised."""
    out = {"arm": arm_id(method, dcfg.name, seed), "method": method, "dataset": dcfg.name, "seed": seed}
    tick = time.perf_counter()
    try:
        tcfg = cfg.train_config(method, dcfg, seed)
        target = rtg_target_for(dcfg, ds)

        def evaluator(policy, eval_index, epoch):
            return evaluate_policy(policy, dcfg.env, dcfg.regime, seed, eval_index, cfg.eval.n_rollouts,
                                   rtg_target=target, random_ref=dcfg.random_ref, expert_ref=dcfg.expert_ref)

        policy, log = train(ds, tcfg, evaluator)
        out.update(
            status="ok", error=None, param_count=param_count(policy), rtg_target=target,
            steps=len(log.steps), steps_per_epoch=log.steps_per_epoch,
            n_train_trajectories=log.n_train_trajectories, final_loss=log.epochs[-1][1],
            evals=[{k: v for k, v in ev.items() if k != "returns"} for ev in log.evals],
            epoch_seconds=log.epoch_seconds,
        )
    except Exception as e:  # noqa: BLE001 -- a failed arm is reported, not fatal
        out.update(status="failed", error=f"{type(e).__name__}: {e}", evals=[], epoch_seconds=[])
    out["wall_clock"] = time.perf_counter() - tick
    return out


def _worker_init():
    from threadpoolctl import threadpool_limits
    threadpool_limits(1)


def _run_job(job):
    return run_arm(*job)


def _mean_std(values):
    n = len(values)
    mean = math.fsum(sorted(values)) / n
    var = math.fsum(sorted((v - mean) ** 2 for v in values)) / n
    return mean, math.sqrt(var)


def aggregate(arms: list, regime_of: dict) -> dict:
    """Mean and std over seeds at matched eval points, per (dataset, method)."""
    groups = {}
    for arm in arms:
        if arm["status"] == "ok":
            groups.setdefault((arm["dataset"], arm["method"]), []).append(arm)
    cells = {}
    for (dataset, method), members in sorted(groups.items()):
        members.sort(key=lambda a: a["seed"])
        n_points = min(len(a["evals"]) for a in members)
        points, best = [], -math.inf
        for j in range(n_points):
            scores = [a["evals"][j]["score"] for a in members]
            mean, std = _mean_std(scores)
            best = max(best, mean)
            points.append({"epoch": members[0]["evals"][j]["epoch"], "mean": mean, "std": std, "best": best})
        cell = {"dataset": dataset, "method": method, "seeds": [a["seed"] for a in members],
                "single_seed": len(members) == 1, "curve": points,
                "param_count": members[0]["param_count"]}
        if points:
            ibest = max(range(n_points), key=lambda j: (points[j]["mean"], -j))
            cell["best"] = {"mean": points[ibest]["mean"], "std": points[ibest]["std"], "epoch": points[ibest]["epoch"]}
            cell["final"] = {"mean": points[-1]["mean"], "std": points[-1]["std"], "epoch": points[-1]["epoch"]}
            cell["headline"] = cell[HEADLINE[regime_of[dataset]]]
        cells[f"{dataset}/{method}"] = cell
    return cells


def prepare(cfg: ExperimentConfig):
    """Build every dataset once; returns ``{name: (DatasetConfig, dataset)}``."""
    return {d.name: (d, build_dataset(d)) for d in cfg.datasets}


def plan(cfg: ExperimentConfig, datasets=None) -> list:
    """Arm list with estimated optimizer step counts (nothing is trained)."""
    datasets = datasets or prepare(cfg)
    rows = []
    for method, dcfg, seed in cfg.arms():
        ds = datasets[dcfg.name][1]
        tcfg = cfg.train_config(method, dcfg, seed)
        try:
            n = apply_filter(ds, tcfg.filter).n_transitions if tcfg.filter else ds.n_transitions
        except DataError as e:
            rows.append({"arm": arm_id(method, dcfg.name, seed), "steps": None, "note": str(e)})
            continue
        spe = math.ceil(n / tcfg.effective_batch_size)
        rows.append({"arm": arm_id(method, dcfg.name, seed), "steps": spe * tcfg.epochs,
                     "train_transitions": n})
    return rows


def run_benchmark(cfg: ExperimentConfig, out_dir, parallel: int = 1, plots: bool = True) -> dict:
    """Run every arm, then write the bundle to ``out_dir``. Returns the summary payload."""
    from .report import write_report

    out_dir = Path(out_dir)
    datasets = prepare(cfg)
    jobs = [(cfg, m, d, s, datasets[d.name][1]) for m, d, s in cfg.arms()]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel, initializer=_worker_init) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    results.sort(key=lambda a: a["arm"])

    (out_dir / "arms").mkdir(parents=True, exist_ok=True)
    timing = {}
    for arm in results:
        timing[arm["arm"]] = {"wall_clock": arm.pop("wall_clock"), "epoch_seconds": arm.pop("epoch_seconds")}
        _write_json(out_dir / "arms" / f"{arm['arm']}.json", arm)
    _write_json(out_dir / "timing.json", timing)

    manifest = {
        "name": cfg.name,
        "version": __version__,
        "config": cfg.raw,
        "methods": list(cfg.methods),
        "seeds": list(cfg.seeds),
        "eval": asdict(cfg.eval),
        "datasets": {
            name: {"env": d.env, "regime": d.regime, "content_hash": content_hash(ds),
                   "n_trajectories": len(ds), "n_transitions": ds.n_transitions,
                   "success_count": ds.success_count() if d.regime == "sparse" else None,
                   "rtg_target": rtg_target_for(d, ds), "random_ref": d.random_ref, "expert_ref": d.expert_ref}
            for name, (d, ds) in datasets.items()
        },
        "arms": [
            {"arm": arm_id(m, d.name, s), "train_config": _jsonable(config_to_dict(cfg.train_config(m, d, s))),
             **{k: a[k] for k in ("status", "error") if k in a},
             **({"param_count": a["param_count"], "steps": a["steps"]} if a["status"] == "ok" else {})}
            for (m, d, s), a in zip(cfg.arms(), _in_arm_order(cfg, results))
        ],
    }
    _write_json(out_dir / "manifest.json", manifest)
    return write_report(out_dir, plots=plots)


def _in_arm_order(cfg, results):
    by_id = {a["arm"]: a for a in results}
    return [by_id[arm_id(m, d.name, s)] for m, d, s in cfg.arms()]


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: asdict(o) if hasattr(o, "__dataclass_fields__") else str(o)))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")


def _default(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def default_parallel() -> int:
    return max(1, min(4, os.cpu_count() or 1))
