"""Command-line interface: ``sparserl dataset|train|eval|bench|report``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 runtime failure (including failed benchmark arms). Flags and file formats
are documented in FORMATS.md.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .bench import build_dataset, plan, prepare, rtg_target_for, run_benchmark
from .config import DatasetConfig, ExperimentConfig
from .config import load as load_config
from .data import load_dataset, save_dataset, total_return
from .envs import ENVS, GeneratorSpec, MixtureComponent, generate_dataset, make_env
from .errors import ConfigError, DataError, SparseRLError
from .evaluation import eval_seeds, evaluate_policy, normalized_score, pairwise_mean, rollout_batch
from .policies import load_checkpoint, save_checkpoint
from .report import write_report
from .rewards import FilterSpec, apply_filter, sparsify
from .training import METHODS, TrainConfig, config_to_dict, train

OUTPUT_ENV = "SPARSERL_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError([f"usage: {message}"])


def _mixture(items):
    comps = []
    for item in items:
        parts = item.split(":")
        try:
            if len(parts) == 2:
                comps.append(MixtureComponent(parts[0], 0.0, int(parts[1])))
            elif len(parts) == 3:
                comps.append(MixtureComponent(parts[0], float(parts[1]), int(parts[2])))
            else:
                raise ValueError
        except ValueError:
            raise ConfigError([f"mixture entries look like quality:count or quality:noise:count, got {item!r}"]) from None
    return GeneratorSpec(tuple(comps))


def _filter_spec(mode, fraction):
    return FilterSpec(mode.replace("-", "_"), fraction)


def _out_dir(path, default):
    if path:
        return Path(path)
    base = os.environ.get(OUTPUT_ENV)
    return Path(base) / default if base else Path(default)


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset_gen(args):
    env = make_env(args.env, args.mode)
    ds = generate_dataset(env, _mixture(args.mixture), args.seed)
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} trajectories ({ds.n_transitions} transitions) to {args.output}")


def inspect_summary(ds):
    returns = np.array([total_return(t) for t in ds.trajectories])
    q = np.quantile(returns, [0.0, 0.25, 0.5, 0.75, 1.0]) if len(returns) else [float("nan")] * 5
    out = {"env": ds.meta.env_name, "regime": ds.meta.reward_regime, "d_s": ds.meta.d_s, "d_a": ds.meta.d_a,
           "max_episode_length": ds.meta.max_episode_length, "trajectories": len(ds),
           "transitions": ds.n_transitions,
           "return_quantiles": dict(zip(("min", "q25", "median", "q75", "max"), map(float, q)))}
    if ds.meta.reward_regime == "sparse":
        out["successful"] = ds.success_count()
    return out


def cmd_dataset_inspect(args):
    ds = load_dataset(args.input)
    info = inspect_summary(ds)
    if args.per_trajectory:
        info["returns"] = [total_return(t) for t in ds.trajectories]
    if args.json:
        print(json.dumps(info, sort_keys=True))
        return
    print(f"env: {info['env']}  regime: {info['regime']}  d_s: {info['d_s']}  d_a: {info['d_a']}")
    print(f"trajectories: {info['trajectories']}  transitions: {info['transitions']}")
    if "successful" in info:
        print(f"successful: {info['successful']} / {info['trajectories']}")
    qs = info["return_quantiles"]
    print("returns: " + "  ".join(f"{k} {v:.6g}" for k, v in qs.items()))
    if args.per_trajectory:
        for i, r in enumerate(info["returns"]):
            print(f"{i} {r!r}")


def cmd_dataset_sparsify(args):
    ds = sparsify(load_dataset(args.input))
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} sparsified trajectories to {args.output}")


def cmd_dataset_filter(args):
    ds = load_dataset(args.input)
    out = apply_filter(ds, _filter_spec(args.mode, args.fraction))
    save_dataset(out, args.output)
    print(f"kept {len(out)} of {len(ds)} trajectories; wrote {args.output}")


# ---------------------------------------------------------------------------
# train / eval


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"method", "seed", "filter"}


def _overrides(pairs):
    out, problems = {}, []
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep:
            problems.append(f"--set expects key=value, got {pair!r}")
            continue
        if key not in _TRAIN_FIELDS:
            problems.append(f"--set: unknown training option {key!r}")
            continue
        try:
            out[key] = tomli.loads(f"v = {value.strip()}")["v"]
        except tomli.TOMLDecodeError:
            out[key] = value.strip()
    return out, problems


def _train_setup(args):
    """Resolve (dataset config, dataset, TrainConfig, eval settings) from flags and an optional config."""
    exp = load_config(args.config) if args.config else None
    dcfg = None
    if exp is not None:
        if args.dataset_name:
            match = [d for d in exp.datasets if d.name == args.dataset_name]
            if not match:
                raise ConfigError([f"no dataset named {args.dataset_name!r} in {args.config}"])
            dcfg = match[0]
        else:
            dcfg = exp.datasets[0]
    if args.data:
        ds = load_dataset(args.data)
        if dcfg is None:
            regime = ds.meta.reward_regime
            dcfg = DatasetConfig(name=Path(args.data).stem, env=ds.meta.env_name, regime=regime,
                                 path=str(args.data),
                                 filter=FilterSpec("success" if regime == "sparse" else "top_fraction"))
    elif dcfg is not None:
        ds = build_dataset(dcfg)
    else:
        raise ConfigError(["train needs --data or a --config with a dataset entry"])
    if args.filter_mode or args.fraction is not None:
        dcfg = replace(dcfg, filter=_filter_spec(args.filter_mode or dcfg.filter.mode,
                                                 args.fraction if args.fraction is not None else dcfg.filter.fraction))
    if args.rtg_target is not None:
        dcfg = replace(dcfg, rtg_target=args.rtg_target)
    if args.random_ref is not None or args.expert_ref is not None:
        dcfg = replace(dcfg, random_ref=args.random_ref, expert_ref=args.expert_ref)
    exp = exp or ExperimentConfig(name="train", methods=(args.method,), seeds=(args.seed,), datasets=(dcfg,))
    overrides, problems = _overrides(args.set)
    if args.eval_every is not None:
        overrides["eval_every_epochs"] = args.eval_every
    try:
        tcfg = exp.train_config(args.method, replace(dcfg, train={**dcfg.train, **overrides}), args.seed)
    except ConfigError as e:
        problems += e.violations
    except TypeError as e:
        problems.append(str(e))
    if problems:
        raise ConfigError(problems)
    return dcfg, ds, tcfg, exp


def cmd_train(args):
    dcfg, ds, tcfg, exp = _train_setup(args)
    out = _out_dir(args.out, f"runs/train_{args.method}_s{args.seed}")
    target = rtg_target_for(dcfg, ds)
    evaluator = None
    if not args.no_eval:
        if dcfg.regime != "sparse" and (dcfg.random_ref is None or dcfg.expert_ref is None):
            raise ConfigError(["evaluation on dense or sparsified data needs --random-ref and --expert-ref "
                               "(or pass --no-eval)"])
        n = args.rollouts or exp.eval.n_rollouts

        def evaluator(policy, eval_index, epoch):
            return evaluate_policy(policy, dcfg.env, dcfg.regime, args.seed, eval_index, n,
                                   rtg_target=target, random_ref=dcfg.random_ref, expert_ref=dcfg.expert_ref)

    policy, log = train(ds, tcfg, evaluator)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"method": args.method, "env": dcfg.env, "regime": dcfg.regime, "rtg_target": target,
             "random_ref": dcfg.random_ref, "expert_ref": dcfg.expert_ref}
    save_checkpoint(policy, out / "checkpoint.ckpt", step=len(log.steps), extra=extra)
    if log.best_eval_params is not None:
        policy.load_flat(log.best_eval_params)
        save_checkpoint(policy, out / "best.ckpt", step=log.best_eval_step, extra=extra)
    (out / "train_log.csv").write_text(log.steps_csv())
    (out / "train_log.jsonl").write_text(log.jsonl())
    resolved = json.loads(json.dumps(config_to_dict(tcfg), default=str))
    (out / "config.json").write_text(json.dumps({"train": resolved, "dataset": dcfg.name, **extra},
                                                indent=2, sort_keys=True) + "\n")
    evals = [{k: v for k, v in ev.items()} for ev in log.evals]
    (out / "eval_report.json").write_text(json.dumps({"evals": evals}, indent=2, sort_keys=True) + "\n")
    print(f"trained {args.method} for {len(log.steps)} steps on {log.n_train_trajectories} trajectories; "
          f"final loss {log.epochs[-1][1]:.6g}")
    for ev in log.evals:
        print(f"  epoch {ev['epoch']}: score {ev['score']:.4f}")
    print(f"wrote {out}")


def cmd_eval(args):
    policy, header = load_checkpoint(args.checkpoint)
    extra = header.get("extra", {})
    env = args.env or extra.get("env")
    regime = args.regime or extra.get("regime")
    if env is None or regime is None:
        raise ConfigError(["the checkpoint does not name its environment; pass --env and --regime"])
    target = args.rtg_target if args.rtg_target is not None else extra.get("rtg_target")
    random_ref = args.random_ref if args.random_ref is not None else extra.get("random_ref")
    expert_ref = args.expert_ref if args.expert_ref is not None else extra.get("expert_ref")
    seeds = eval_seeds(args.seed, "cli", args.rollouts)
    results = rollout_batch(policy, env, regime, seeds, target)
    records = [{"index": i, "seed": s, "return": r.ret, "success": r.success, "length": len(r.trajectory)}
               for i, (s, r) in enumerate(zip(seeds, results))]
    report = {"checkpoint": str(args.checkpoint), "env": env, "regime": regime, "rtg_target": target,
              "n_rollouts": len(records), "mean_return": pairwise_mean([r["return"] for r in records]),
              "rollouts": records}
    if regime == "sparse":
        report["success_rate"] = pairwise_mean([1.0 if r["success"] else 0.0 for r in records])
    elif random_ref is not None and expert_ref is not None:
        report["normalized_score"] = normalized_score(report["mean_return"], random_ref, expert_ref)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# bench / report


def cmd_bench(args):
    cfg = load_config(args.config)
    out = _out_dir(args.out, cfg.output_dir or f"runs/{cfg.name}")
    if args.dry_run:
        rows = plan(cfg, prepare(cfg))
        for r in rows:
            steps = "n/a" if r["steps"] is None else r["steps"]
            print(f"{r['arm']}  steps={steps}" + (f"  ({r['note']})" if "note" in r else ""))
        total = sum(r["steps"] or 0 for r in rows)
        print(f"{len(rows)} arms, {total} optimizer steps; output would go to {out}")
        return 0
    summary = run_benchmark(cfg, out, parallel=args.parallel, plots=not args.no_plots)
    print((out / "summary.txt").read_text(), end="")
    if summary["failed_arms"]:
        for f in summary["failed_arms"]:
            print(f"FAILED {f['arm']}: {f['error']}", file=sys.stderr)
        return 3
    return 0


def cmd_report(args):
    write_report(args.bundle, args.out, plots=not args.no_plots)
    print((Path(args.out or args.bundle) / "summary.txt").read_text(), end="")


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="sparserl", description="Offline RL with filtered behavior cloning and decision transformers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", help="generate, inspect and transform trajectory datasets")
    dsub = d.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    g = dsub.add_parser("gen", help="roll out scripted policies")
    g.add_argument("--env", required=True, choices=sorted(ENVS))
    g.add_argument("--mode", choices=["sparse", "dense"], default=None, help="reward mode (environment default)")
    g.add_argument("--mixture", nargs="+", required=True, metavar="QUALITY[:NOISE]:COUNT")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("output")
    g.set_defaults(func=cmd_dataset_gen)
    i = dsub.add_parser("inspect", help="print counts, success totals and return quantiles")
    i.add_argument("input")
    i.add_argument("--per-trajectory", action="store_true", help="also list every trajectory's total return")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_dataset_inspect)
    s = dsub.add_parser("sparsify", help="move each trajectory's return to its last step")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_dataset_sparsify)
    f = dsub.add_parser("filter", help="keep successful or top-return trajectories")
    f.add_argument("--mode", required=True, choices=["success", "top-fraction", "top_fraction"])
    f.add_argument("--fraction", type=float, default=0.10)
    f.add_argument("input")
    f.add_argument("output")
    f.set_defaults(func=cmd_dataset_filter)

    t = sub.add_parser("train", help="train one method on one dataset")
    t.add_argument("method", choices=METHODS)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--data", help="dataset file (otherwise built from --config)")
    t.add_argument("--config", help="experiment config supplying training and dataset options")
    t.add_argument("--dataset-name", help="dataset entry of --config to use (default: the first)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a training option")
    t.add_argument("--filter-mode", choices=["success", "top-fraction", "top_fraction"])
    t.add_argument("--fraction", type=float)
    t.add_argument("--eval-every", type=int, help="evaluate every N epochs")
    t.add_argument("--rollouts", type=int, help="rollouts per evaluation")
    t.add_argument("--rtg-target", type=float)
    t.add_argument("--random-ref", type=float)
    t.add_argument("--expert-ref", type=float)
    t.add_argument("--no-eval", action="store_true")
    t.add_argument("--out", help=f"output directory (default under ${OUTPUT_ENV} or ./runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--rollouts", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--env", choices=sorted(ENVS))
    e.add_argument("--regime", choices=["sparse", "sparsified", "dense"])
    e.add_argument("--rtg-target", type=float)
    e.add_argument("--random-ref", type=float)
    e.add_argument("--expert-ref", type=float)
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a methods x datasets x seeds matrix")
    b.add_argument("--config", required=True)
    b.add_argument("--out")
    b.add_argument("--parallel", type=int, default=1, help="arms run concurrently (results do not depend on it)")
    b.add_argument("--dry-run", action="store_true", help="list arms and step counts without training")
    b.add_argument("--no-plots", action="store_true")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="render tables and curves from a bundle")
    r.add_argument("bundle")
    r.add_argument("--out", help="write outputs here instead of into the bundle")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "rollouts", None) is not None and args.rollouts < 1:
            raise ConfigError(["--rollouts must be >= 1"])
        if getattr(args, "parallel", 1) < 1:
            raise ConfigError(["--parallel must be >= 1"])
        return args.func(args) or 0
    except ConfigError as e:
        print("configuration error:", file=sys.stderr)
        for v in e.violations:
            print(f"  - {v}", file=sys.stderr)
        return e.exit_code
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return e.exit_code
    except SparseRLError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"data error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
