"""Experiment configuration files.

An experiment is a TOML document validated against :data:`SCHEMA`. Every
violation is collected before anything runs, and unknown keys are rejected.
See FORMATS.md for a commented example.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import tomli

from .envs import ENVS, GeneratorSpec
from .errors import ConfigError
from .evaluation import EvalConfig
from .rewards import FilterSpec
from .training import METHODS, TrainConfig

_TRAIN_KEYS = {
    "epochs": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "grad_clip": {"type": "number", "exclusiveMinimum": 0},
    "warmup_steps": {"type": "integer", "minimum": 1},
    "lr_decay": {"type": "number", "exclusiveMinimum": 0},
    "lr_decay_epoch": {"type": "integer", "minimum": 0},
    "context_K": {"type": "integer", "minimum": 1},
    "mlp_depth": {"type": "integer", "minimum": 0},
    "mlp_hidden": {"type": "integer", "minimum": 1},
    "dt_layers": {"type": "integer", "minimum": 1},
    "dt_heads": {"type": "integer", "minimum": 1},
    "dt_embed_dim": {"type": "integer", "minimum": 2},
    "dt_dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "dt_max_episode_length": {"type": "integer", "minimum": 1},
    "dt_pos_encoding": {"enum": ["sinusoidal", "learned"]},
    "rtg_scale": {"type": "number", "exclusiveMinimum": 0},
}

_TRAIN_SECTION = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        **_TRAIN_KEYS,
        "bc": {"type": "object", "additionalProperties": False, "properties": _TRAIN_KEYS},
        "dt": {"type": "object", "additionalProperties": False, "properties": _TRAIN_KEYS},
    },
}

_COMPONENT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["quality", "count"],
    "properties": {
        "quality": {"enum": ["expert", "medium", "random"]},
        "noise_scale": {"type": "number", "minimum": 0},
        "count": {"type": "integer", "minimum": 0},
    },
}

_DATASET = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "env", "regime"],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "env": {"enum": sorted(ENVS)},
        "regime": {"enum": ["sparse", "sparsified"]},
        "seed": {"type": "integer", "minimum": 0},
        "mixture": {"type": "array", "minItems": 1, "items": _COMPONENT},
        "path": {"type": "string"},
        "rtg_target": {"type": "number"},
        "random_ref": {"type": "number"},
        "expert_ref": {"type": "number"},
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["success", "top_fraction"]},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "train": _TRAIN_SECTION,
    },
    "oneOf": [{"required": ["mixture"]}, {"required": ["path"]}],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "methods", "seeds", "datasets"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "output_dir": {"type": "string"},
        "methods": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": list(METHODS)}},
        "seeds": {"type": "array", "minItems": 1, "uniqueItems": True,
                  "items": {"type": "integer", "minimum": 0}},
        "train": _TRAIN_SECTION,
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_rollouts": {"type": "integer", "minimum": 1},
                "eval_every_epochs": {"type": "integer", "minimum": 1},
            },
        },
        "datasets": {"type": "array", "minItems": 1, "items": _DATASET},
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    env: str
    regime: str
    seed: int = 0
    mixture: Optional[GeneratorSpec] = None
    path: Optional[str] = None
    rtg_target: Optional[float] = None
    random_ref: Optional[float] = None
    expert_ref: Optional[float] = None
    filter: FilterSpec = field(default_factory=FilterSpec)
    train: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    methods: tuple
    seeds: tuple
    datasets: tuple
    train: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: Optional[str] = None
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def train_config(self, method, dataset: DatasetConfig, seed) -> TrainConfig:
        """Resolved TrainConfig: shared keys, then the method family's keys, then the dataset's."""
        family = "dt" if method in ("dt", "fdt") else "bc"
        kw = {}
        for section in (self.train, dataset.train):
            kw.update({k: v for k, v in section.items() if k not in ("bc", "dt")})
            kw.update(section.get(family, {}))
        kw.setdefault("eval_every_epochs", self.eval.eval_every_epochs)
        flt = dataset.filter if method in ("fbc", "fdt") else None
        return TrainConfig(method=method, seed=seed, filter=flt, **kw)

    def arms(self):
        """(method, dataset, seed) triples in canonical order."""
        return [(m, d, s) for d in self.datasets for m in self.methods for s in self.seeds]


def _format_error(err) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def validate(doc: dict) -> list:
    """All schema and cross-field violations in ``doc`` (empty if valid)."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    problems = [_format_error(e) for e in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))]
    for i, ds in enumerate(doc.get("datasets", []) if isinstance(doc.get("datasets"), list) else []):
        if not isinstance(ds, dict):
            continue
        if ds.get("regime") == "sparse" and ds.get("env") == "chain_run":
            problems.append(f"datasets/{i}: chain_run has no sparse reward mode")
        if ds.get("regime") == "sparsified" and ("random_ref" not in ds or "expert_ref" not in ds):
            problems.append(f"datasets/{i}: sparsified datasets need random_ref and expert_ref")
        flt = ds.get("filter", {})
        if isinstance(flt, dict) and ds.get("regime") == "sparse" and flt.get("mode") == "top_fraction":
            problems.append(f"datasets/{i}: sparse datasets are filtered by success, not top_fraction")
        if isinstance(flt, dict) and ds.get("regime") == "sparsified" and flt.get("mode") == "success":
            problems.append(f"datasets/{i}: sparsified datasets are filtered by top_fraction, not success")
    names = [d.get("name") for d in doc.get("datasets", []) if isinstance(d, dict)]
    if len(set(names)) != len(names):
        problems.append("datasets: names must be unique")
    return problems


def parse(doc: dict) -> ExperimentConfig:
    problems = validate(doc)
    if problems:
        raise ConfigError(problems)
    datasets = []
    for d in doc["datasets"]:
        flt = d.get("filter", {})
        mode = flt.get("mode", "success" if d["regime"] == "sparse" else "top_fraction")
        datasets.append(DatasetConfig(
            name=d["name"], env=d["env"], regime=d["regime"], seed=d.get("seed", 0),
            mixture=GeneratorSpec(tuple(d["mixture"])) if "mixture" in d else None,
            path=d.get("path"), rtg_target=d.get("rtg_target"),
            random_ref=d.get("random_ref"), expert_ref=d.get("expert_ref"),
            filter=FilterSpec(mode, flt.get("fraction", 0.10)), train=d.get("train", {}),
        ))
    ev = doc.get("eval", {})
    cfg = ExperimentConfig(
        name=doc["name"], methods=tuple(doc["methods"]), seeds=tuple(doc["seeds"]),
        datasets=tuple(datasets), train=doc.get("train", {}),
        eval=EvalConfig(seeds=tuple(doc["seeds"]), **ev),
        output_dir=doc.get("output_dir"), raw=copy.deepcopy(doc),
    )
    # surface TrainConfig violations now rather than mid-benchmark
    problems = []
    for method, ds, seed in cfg.arms():
        try:
            cfg.train_config(method, ds, seed)
        except ConfigError as e:
            problems += [f"{ds.name}/{method}: {v}" for v in e.violations]
        except TypeError as e:
            problems.append(f"{ds.name}/{method}: {e}")
    if problems:
        raise ConfigError(sorted(set(problems)))
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError([f"not valid TOML: {e}"]) from None
    return parse(doc)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([f"cannot read {path}: {e.strerror}"]) from None
    return loads(text)


def shipped(name: str) -> Path:
    """Path of a config bundled with the package, e.g. ``shipped("toy_sparse")``."""
    return Path(__file__).parent / "configs" / f"{name}.toml"
