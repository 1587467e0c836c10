import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparserl.data import DatasetMeta, Trajectory, TrajectoryDataset, returns_to_go, total_return
from sparserl.errors import ConfigError, DataError, EmptyFilterError, RegimeError
from sparserl.rewards import (FilterSpec, apply_filter, filter_successful, filter_top_fraction, label_sparse,
                              sparsify, top_fraction_count)

from conftest import dense_dataset, sparse_dataset, sparsified_with_finals


def dense_of(*reward_lists):
    trajs = tuple(Trajectory(np.zeros((len(r), 1)), np.zeros((len(r), 1)), r) for r in reward_lists)
    return TrajectoryDataset(trajs, DatasetMeta("toy", 1, 1, max(map(len, reward_lists)), "dense"))


@pytest.mark.parametrize("rewards, expected", [([1, 2, 3], [0, 0, 6]), ([5], [5]), ([0, 0, 0, 0], [0, 0, 0, 0])])
def test_sparsify_examples(rewards, expected):
    out = sparsify(dense_of(rewards))
    np.testing.assert_array_equal(out[0].rewards, expected)
    assert out.meta.reward_regime == "sparsified"


def test_sparsify_keeps_states_and_actions():
    ds = dense_dataset(5)
    out = sparsify(ds)
    for a, b in zip(ds, out):
        assert a.states.tobytes() == b.states.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes()


def test_sparsify_needs_dense():
    with pytest.raises(RegimeError):
        sparsify(sparsify(dense_dataset(2)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30), min_size=1, max_size=5))
def test_sparsify_conserves_return_bitwise(reward_lists):
    ds = dense_of(*reward_lists)
    out = sparsify(ds)
    for a, b in zip(ds, out):
        assert total_return(a) == total_return(b)
        assert returns_to_go(a)[0] == returns_to_go(b)[0]
        assert not np.any(b.rewards[:-1])


def test_label_sparse_counts():
    ds = dense_dataset(300, seed=3)
    flags = [i % 3 == 0 for i in range(300)]
    out = label_sparse(ds, flags)
    totals = [total_return(t) for t in out]
    assert totals.count(1.0) == 100 and totals.count(0.0) == 200
    assert out.success_count() == 100


@pytest.mark.parametrize("flag, total", [(False, 0.0), (True, 1.0)])
def test_label_sparse_uniform(flag, total):
    out = label_sparse(dense_dataset(20), [flag] * 20)
    assert all(total_return(t) == total for t in out)


def test_label_sparse_flag_count_checked():
    with pytest.raises(DataError):
        label_sparse(dense_dataset(3), [True])


@pytest.mark.parametrize("n, n_success", [(1500, 244), (3900, 716)])
def test_filter_successful_fixture_counts(n, n_success):
    ds = sparse_dataset(n, n_success, max_len=3)
    out = filter_successful(ds)
    assert len(out) == n_success
    assert all(t.success and t.final_reward == 1.0 for t in out)


def test_filter_successful_identity_when_all_succeed():
    ds = sparse_dataset(12, 12)
    assert filter_successful(ds) == ds


def test_filter_successful_empty_is_an_error():
    with pytest.raises(EmptyFilterError):
        filter_successful(sparse_dataset(10, 0))


def test_filter_successful_needs_sparse():
    with pytest.raises(RegimeError):
        filter_successful(sparsified_with_finals([1.0, 2.0]))


def test_top_fraction_keeps_max():
    out = filter_top_fraction(sparsified_with_finals(list(range(10))), FilterSpec("top_fraction", 0.10))
    assert [t.final_reward for t in out] == [9.0]


def test_top_fraction_ties_go_to_lower_index():
    ds = sparsified_with_finals([3.0] * 5)
    out = filter_top_fraction(ds, FilterSpec("top_fraction", 0.4))
    assert list(out) == [ds[0], ds[1]]


def test_top_fraction_one_is_identity():
    ds = sparsified_with_finals([4.0, -1.0, 2.0, 2.0])
    assert filter_top_fraction(ds, FilterSpec("top_fraction", 1.0)) == ds


@pytest.mark.parametrize("n", [1, 9, 10, 11, 1000])
def test_top_fraction_count_is_ceiling(n):
    assert top_fraction_count(n, 0.1) == math.ceil(n / 10)


@pytest.mark.parametrize("n, f, k", [(10, 0.7, 7), (10, 0.3, 3), (100, 0.07, 7), (3, 0.01, 1)])
def test_top_fraction_count_decimal_exact(n, f, k):
    assert top_fraction_count(n, f) == k


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=60), st.floats(0.01, 1.0))
def test_top_fraction_matches_sort_oracle(finals, fraction):
    ds = sparsified_with_finals([float(f) for f in finals])
    out = filter_top_fraction(ds, FilterSpec("top_fraction", fraction))
    k = top_fraction_count(len(finals), fraction)
    oracle = sorted(sorted(range(len(finals)), key=lambda i: (-finals[i], i))[:k])
    assert list(out) == [ds[i] for i in oracle]
    kept = [t.final_reward for t in out]
    dropped = [ds[i].final_reward for i in range(len(ds)) if i not in oracle]
    assert not dropped or min(kept) >= max(dropped)


def test_filters_do_not_mutate_input():
    ds = sparsified_with_finals([1.0, 5.0, 3.0])
    before = [t.rewards.tobytes() for t in ds]
    filter_top_fraction(ds, FilterSpec("top_fraction", 0.5))
    assert [t.rewards.tobytes() for t in ds] == before


def test_apply_filter_dispatch():
    assert len(apply_filter(sparse_dataset(10, 4), FilterSpec("success"))) == 4
    assert len(apply_filter(sparsified_with_finals(list(range(20))), FilterSpec("top_fraction", 0.25))) == 5


@pytest.mark.parametrize("mode, frac", [("best", 0.1), ("success", 0.0), ("top_fraction", 1.5)])
def test_filter_spec_validation(mode, frac):
    with pytest.raises(ConfigError):
        FilterSpec(mode, frac)
