import numpy as np
import pytest

from sparserl.envs import PointReach, ScriptedPolicy, generate_dataset, make_env, GeneratorSpec
from sparserl.errors import ConfigError, DimensionError
from sparserl.evaluation import (DTSession, EvalConfig, dt_infer_step, evaluate_policy, make_eval_env,
                                 normalized_score, rollout, rollout_batch)
from sparserl.policies import DTPolicy, DTPolicyConfig, MLPPolicy, MLPPolicyConfig, dt_forward, ContextWindow


def small_dt(d_s, d_a, K=3, max_len=100, seed=0):
    return DTPolicy(DTPolicyConfig(d_s, d_a, context_K=K, layers=1, embed_dim=8, max_episode_length=max_len),
                    seed=seed)


@pytest.mark.parametrize("raw, expected", [(2.0, 0.0), (10.0, 100.0), (6.0, 50.0), (14.0, 150.0)])
def test_normalized_score(raw, expected):
    assert normalized_score(raw, 2.0, 10.0) == expected


def test_normalized_score_degenerate_refs():
    with pytest.raises(ConfigError):
        normalized_score(1.0, 3.0, 3.0)
    with pytest.raises(ConfigError):
        EvalConfig(random_ref=1.0, expert_ref=1.0)


def check_rtg_trace(results, target):
    for res in results:
        acc = 0.0
        for t, r in enumerate(res.observed_rewards):
            assert res.rtg[t] == target - acc
            acc = acc + r


def test_rtg_invariant_dense_rewards():
    results = rollout_batch(small_dt(2, 1, K=4), "chain_run", "dense", list(range(50)), rtg_target=75.0)
    assert len(results) == 50 and all(len(r.rtg) == 100 for r in results)
    check_rtg_trace(results, 75.0)


def test_rtg_invariant_sparse_target_one():
    results = rollout_batch(small_dt(4, 2, K=2, max_len=50), "point_reach", "sparse", list(range(50)), rtg_target=1.0)
    check_rtg_trace(results, 1.0)
    assert all(np.all(r.rtg[:-1] == 1.0) for r in results)


def test_session_window_is_bounded_by_k():
    policy = small_dt(2, 1, K=1)
    session = DTSession(policy, 10.0)
    for t in range(5):
        a = dt_infer_step(policy, session, np.array([0.1 * t, 0.0]))
        assert len(session.window) == 1
        session.update(a, 1.0)
    assert session.rtg[0] == 10.0 - 5.0


def test_k1_session_matches_feed_forward():
    policy = small_dt(2, 1, K=1)
    session = DTSession(policy, 3.0)
    s = np.array([0.4, -0.1])
    a = dt_infer_step(policy, session, s)
    ff = dt_forward(policy, ContextWindow([3.0], s[None], np.zeros((1, 1)), [0]))
    assert a.tobytes() == ff.tobytes()


def test_act_twice_without_update_rejected():
    session = DTSession(small_dt(2, 1), 1.0)
    session.act(np.zeros((1, 2)))
    with pytest.raises(RuntimeError):
        session.act(np.zeros((1, 2)))


def test_zero_mlp_at_goal_succeeds():
    policy = MLPPolicy(MLPPolicyConfig(4, 2, hidden=8))
    policy.load_flat(np.zeros(policy.param_count()))
    env = make_env("point_reach", "sparse")
    env.reset(0)
    s = env.set_state([0.2, 0.2], [0.2, 0.2])
    done = False
    while not done:
        s, r, done = env.step(policy.act(s[None])[0])
    assert r == 1.0 and env.success()


def test_scripted_expert_matches_generator_rate():
    pol = ScriptedPolicy(PointReach, "expert")
    results = rollout_batch(pol, "point_reach", "sparse", list(range(20)))
    ds = generate_dataset(make_env("point_reach"), GeneratorSpec(({"quality": "expert", "count": 20},)), 0)
    assert np.mean([r.success for r in results]) == ds.success_count() / len(ds) == 1.0


def test_rollouts_are_deterministic():
    policy = MLPPolicy(MLPPolicyConfig(4, 2, hidden=8), seed=2)
    env = make_env("point_reach", "sparse")
    t1, r1, s1 = rollout(policy, env, 5)
    t2, r2, s2 = rollout(policy, env, 5)
    assert t1 == t2 and r1 == r2 and s1 == s2


def test_batched_rollouts_match_single():
    policy = small_dt(2, 1, K=3)
    batch = rollout_batch(policy, "chain_run", "sparsified", [3, 4, 5], rtg_target=50.0)
    for seed, res in zip([3, 4, 5], batch):
        single = rollout_batch(policy, "chain_run", "sparsified", [seed], rtg_target=50.0)[0]
        np.testing.assert_allclose(single.trajectory.actions, res.trajectory.actions, rtol=0, atol=1e-12)


def test_sparsified_eval_env_delivers_total_at_end():
    env = make_eval_env("chain_run", "sparsified")
    env.reset(0)
    rewards = [env.step([1.0])[1] for _ in range(100)]
    assert all(r == 0.0 for r in rewards[:-1])
    assert abs(rewards[-1] - (100 - 9 * (1 - 0.9 ** 100))) < 1e-9


def test_evaluate_policy_reports():
    mlp = MLPPolicy(MLPPolicyConfig(2, 1, hidden=8))
    sparse = evaluate_policy(MLPPolicy(MLPPolicyConfig(4, 2, hidden=8)), "point_reach", "sparse", 0, 0, 10)
    assert sparse["n_rollouts"] == 10 and sparse["score"] == sparse["success_rate"]
    dense = evaluate_policy(mlp, "chain_run", "sparsified", 0, 1, 6, random_ref=0.0, expert_ref=90.0)
    assert dense["score"] == normalized_score(dense["mean_return"], 0.0, 90.0)
    with pytest.raises(ConfigError):
        evaluate_policy(mlp, "chain_run", "sparsified", 0, 1, 2)


def test_eval_points_use_fresh_seeds():
    mlp = MLPPolicy(MLPPolicyConfig(2, 1, hidden=8))
    a = evaluate_policy(mlp, "chain_run", "dense", 0, 0, 4, random_ref=0.0, expert_ref=1.0)
    b = evaluate_policy(mlp, "chain_run", "dense", 0, 1, 4, random_ref=0.0, expert_ref=1.0)
    assert a["returns"] != b["returns"]


def test_policy_env_dims_must_match():
    with pytest.raises(DimensionError):
        rollout_batch(MLPPolicy(MLPPolicyConfig(3, 1)), "chain_run", "dense", [0])
    with pytest.raises(ConfigError):
        rollout_batch(small_dt(2, 1), "chain_run", "dense", [0])
