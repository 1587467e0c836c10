import numpy as np
import pytest

from sparserl.data import DatasetMeta, Trajectory, TrajectoryDataset


def make_traj(rng, T, d_s, d_a, rewards=None, success=None):
    return Trajectory(rng.normal(size=(T, d_s)), rng.uniform(-1, 1, size=(T, d_a)),
                      rng.normal(size=T) if rewards is None else np.asarray(rewards, dtype=float), success)


def sparse_dataset(n, n_success, d_s=18, d_a=7, seed=0, env="lift_like", max_len=8):
    """``n`` short trajectories with binary terminal rewards, ``n_success`` of them successful."""
    rng = np.random.default_rng(seed)
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:n_success]] = True
    trajs = []
    for ok in flags:
        T = int(rng.integers(1, max_len + 1))
        r = np.zeros(T)
        r[-1] = 1.0 if ok else 0.0
        trajs.append(make_traj(rng, T, d_s, d_a, r, bool(ok)))
    return TrajectoryDataset(tuple(trajs), DatasetMeta(env, d_s, d_a, max_len, "sparse"))


def dense_dataset(n, d_s=3, d_a=2, seed=0, max_len=10, env="toy"):
    rng = np.random.default_rng(seed)
    trajs = tuple(make_traj(rng, int(rng.integers(1, max_len + 1)), d_s, d_a) for _ in range(n))
    return TrajectoryDataset(trajs, DatasetMeta(env, d_s, d_a, max_len, "dense"))


def sparsified_with_finals(finals, d_s=2, d_a=1, T=3):
    rng = np.random.default_rng(0)
    trajs = []
    for f in finals:
        r = np.zeros(T)
        r[-1] = f
        trajs.append(make_traj(rng, T, d_s, d_a, r))
    return TrajectoryDataset(tuple(trajs), DatasetMeta("toy", d_s, d_a, T, "sparsified"))


@pytest.fixture(scope="session")
def lift_like():
    return sparse_dataset(1500, 244)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def relerr(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor); the floor keeps near-zero entries meaningful."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_fd(loss_fn, param, index, h=1e-6):
    """d loss / d param[index] by central differences; ``param`` is a numpy array edited in place."""
    old = param[index]
    param[index] = old + h
    up = loss_fn()
    param[index] = old - h
    down = loss_fn()
    param[index] = old
    return (up - down) / (2 * h)


TINY_BENCH = """
name = "tiny"
methods = ["bc", "fbc", "dt", "fdt"]
seeds = [0, 1]

[train]
epochs = 2
batch_size = 64
lr = 1e-3

[train.bc]
mlp_hidden = 16

[train.dt]
context_K = 2
dt_layers = 1
dt_embed_dim = 8
dt_max_episode_length = 100
warmup_steps = 10

[eval]
n_rollouts = 4
eval_every_epochs = 1

[[datasets]]
name = "pr"
env = "point_reach"
regime = "sparse"
filter = { mode = "success" }
mixture = [{ quality = "expert", count = 3 }, { quality = "random", count = 3 }]

[[datasets]]
name = "cr"
env = "chain_run"
regime = "sparsified"
random_ref = 0.14
expert_ref = 91.0
filter = { mode = "top_fraction", fraction = 0.5 }
mixture = [{ quality = "random", count = 2 }, { quality = "medium", noise_scale = 1.0, count = 2 }]
"""


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_BENCH)
    return path


def bundle_bytes(root):
    """Every file of a bundle except the wall-clock record, keyed by relative path."""
    from pathlib import Path
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
