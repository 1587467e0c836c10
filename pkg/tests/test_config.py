import pytest

from sparserl.config import load, loads, parse, shipped, validate
from sparserl.errors import ConfigError
from sparserl.rewards import FilterSpec

BASE = """
name = "tiny"
methods = ["bc", "fbc", "dt", "fdt"]
seeds = [0, 1]

[train]
epochs = 2
lr = 1e-3

[train.bc]
mlp_hidden = 16

[train.dt]
dt_embed_dim = 8
context_K = 2

[eval]
n_rollouts = 3
eval_every_epochs = 1

[[datasets]]
name = "pr"
env = "point_reach"
regime = "sparse"
mixture = [{ quality = "expert", count = 3 }, { quality = "random", count = 3 }]

[[datasets]]
name = "cr"
env = "chain_run"
regime = "sparsified"
random_ref = 0.0
expert_ref = 90.0
filter = { mode = "top_fraction", fraction = 0.5 }
train = { epochs = 3, dt = { context_K = 4 } }
mixture = [{ quality = "random", count = 4 }]
"""


def test_valid_config_parses():
    cfg = loads(BASE)
    assert cfg.name == "tiny" and len(cfg.arms()) == 16
    assert cfg.eval.n_rollouts == 3


def test_layered_train_options():
    cfg = loads(BASE)
    pr, cr = cfg.datasets
    bc = cfg.train_config("bc", pr, 0)
    assert (bc.epochs, bc.lr, bc.mlp_hidden, bc.filter, bc.eval_every_epochs) == (2, 1e-3, 16, None, 1)
    assert cfg.train_config("dt", pr, 0).context_K == 2
    fdt = cfg.train_config("fdt", cr, 1)
    assert (fdt.epochs, fdt.context_K, fdt.seed) == (3, 4, 1)
    assert fdt.filter == FilterSpec("top_fraction", 0.5)
    assert cfg.train_config("fbc", pr, 0).filter == FilterSpec("success", 0.1)


def test_arm_order_is_dataset_method_seed():
    cfg = loads(BASE)
    arms = [(d.name, m, s) for m, d, s in cfg.arms()]
    assert arms[:3] == [("pr", "bc", 0), ("pr", "bc", 1), ("pr", "fbc", 0)]
    assert arms[-1] == ("cr", "fdt", 1)


def test_every_violation_is_reported():
    bad = BASE.replace('seeds = [0, 1]', 'seeds = [0, 0]').replace('epochs = 2', 'epochs = 0\nbogus = 1')
    bad = bad.replace('env = "chain_run"', 'env = "chain_run"\ncolour = "red"')
    with pytest.raises(ConfigError) as e:
        loads(bad)
    text = "\n".join(e.value.violations)
    assert len(e.value.violations) >= 4
    for needle in ("seeds", "epochs", "bogus", "colour"):
        assert needle in text


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError) as e:
        loads(BASE + '\nextra_key = 3\n')
    assert any("extra_key" in v for v in e.value.violations)


@pytest.mark.parametrize("patch, needle", [
    (('regime = "sparse"', 'regime = "sparse"\nfilter = { mode = "top_fraction" }'), "top_fraction"),
    (('expert_ref = 90.0\n', ''), "expert_ref"),
    (('name = "cr"', 'name = "pr"'), "unique"),
    (('env = "chain_run"\nregime = "sparsified"', 'env = "chain_run"\nregime = "sparse"'), "chain_run"),
    (('mixture = [{ quality = "random", count = 4 }]', 'path = "x.traj"\nmixture = [{ quality = "random", count = 4 }]'), "datasets/1"),
])
def test_cross_field_checks(patch, needle):
    with pytest.raises(ConfigError) as e:
        loads(BASE.replace(*patch))
    assert any(needle in v for v in e.value.violations)


def test_train_config_errors_surface_at_parse_time():
    with pytest.raises(ConfigError) as e:
        loads(BASE.replace("context_K = 2", "context_K = 0"))
    assert any("context_K" in v for v in e.value.violations)


def test_malformed_toml():
    with pytest.raises(ConfigError):
        loads("name = ")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "nope.toml")


@pytest.mark.parametrize("name", ["toy_sparse", "toy_sparsified"])
def test_shipped_configs_are_valid(name):
    cfg = load(shipped(name))
    assert set(cfg.methods) == {"bc", "fbc", "dt", "fdt"} and list(cfg.seeds) == [0, 1, 2, 3, 4]
    assert validate(__import__("tomli").loads(shipped(name).read_text())) == []


def test_parse_accepts_dict():
    import tomli
    doc = tomli.loads(BASE)
    assert parse(doc).raw == doc
