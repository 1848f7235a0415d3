import numpy as np
import pytest

import oracles
from rvslab.environments import EnvError, collect_random, collect_scripted, get_env, reset, step
from rvslab.evaluation import (
    DynamicGoal,
    EvalReport,
    FixedGoal,
    FixedReturnTarget,
    StitchingAuditError,
    Unconditioned,
    default_plan,
    evaluate,
    goal_pools,
    goal_strategy_compare,
    parse_range,
    read_eval_summary,
    reward_target_sweep,
    rollout,
    stitching_eval,
)
from rvslab.seeding import derive_seed
from rvslab.training import PolicyArtifact, TrainConfig, make_head, make_outcome
from rvslab import nn_core
from rvslab.trajectory_data import Dataset, Trajectory, concat_datasets


def make_artifact(env_id, outcome="goal", head="categorical", bias=None, width=16, dataset_hash="", **cfg):
    """A small untrained policy; ``bias`` replaces the output layer with a constant."""
    config = TrainConfig(hidden_width=width, outcome=outcome, head=head, **cfg)
    spec = get_env(env_id).spec
    out = make_outcome(config, env_id)
    policy = nn_core.init_mlp(spec.state_dim + out.condition_dim(spec.state_dim), width,
                              make_head(config, env_id), 0)
    if bias is not None:
        policy.params["W3"][:] = 0.0
        policy.params["b3"][:] = bias
        if "log_std" in policy.params:
            policy.params["log_std"][:] = -5.0
    return PolicyArtifact(policy, config, env_id, out, spec.state_dim, dataset_hash)


def test_single_rollout_matches_evaluate():
    art = make_artifact("four_rooms")
    rep = evaluate("four_rooms", art, n_rollouts=1, seed=7)
    plan = default_plan(art)(0, 7)
    direct = rollout("four_rooms", art, plan, derive_seed(7, "rollout", 0))
    rec = rep.records[0]
    assert rec.goal == direct.goal and rec.success == direct.success
    assert all(np.array_equal(a, b) for a, b in zip(rec.actions, direct.actions))
    assert rep.mean_return == direct.episode_return


def test_rollout_replays_in_environment():
    art = make_artifact("point_reach", head="gaussian")
    r = rollout("point_reach", art, FixedGoal((5.0, 5.0)), 3)
    s = reset("point_reach", 3, (5.0, 5.0))
    for k, a in enumerate(r.actions):
        assert np.array_equal(s.observation(), r.states[k])
        s, rew, _ = step(s, a)
        assert rew == r.rewards[k]
    assert np.array_equal(s.observation(), r.states[-1])


def test_uniform_policy_matches_random_reference():
    # zero output layer -> uniform over the five actions, i.e. the random reference policy
    art = make_artifact("four_rooms", outcome="none", bias=0.0)
    n = 1000
    rep = evaluate("four_rooms", art, n_rollouts=n, seed=11)
    p = get_env("four_rooms").spec.random_return
    assert oracles.binomial_ok(round(rep.mean_return * n), n, p)
    assert abs(rep.normalized_score) < 100 * 3 * np.sqrt(p * (1 - p) / n) / (1 - p) + 1e-9


def test_dynamic_goal_switches_once_at_waypoint():
    env = get_env("point_reach")
    seed = next(s for s in range(1000) if env.reset(s).obs[0] < 3.0)
    x, y = env.reset(seed).obs
    b, c = (x + 3.0, y), (x + 6.0, y)
    # constant action (+1, 0): reaches b after 3 steps and c after 6
    art = make_artifact("point_reach", head="gaussian", bias=[1.0, 0.0])
    r = rollout("point_reach", art, DynamicGoal((b, c)), seed, mode="deterministic")
    assert r.switch_steps == [3]
    assert r.success and r.length == 6 and r.goal == c
    assert [tuple(v) for v in r.conditions] == [b] * 3 + [c] * 3


def test_fixed_return_target_is_constant():
    art = make_artifact("two_mode_line", outcome="avg_return", head="gaussian")
    r = rollout("two_mode_line", art, FixedReturnTarget.from_episode_return(40.0, 50), 0)
    assert r.length == 50
    assert all(c.tolist() == [0.8] for c in r.conditions)
    rec = rollout("two_mode_line", art, FixedReturnTarget.from_episode_return(40.0, 50, recompute=True), 0)
    assert rec.conditions[0].tolist() == [0.8]
    expected = [(40.0 - sum(rec.rewards[:k])) / (50 - k) for k in range(50)]
    assert np.allclose(np.concatenate(rec.conditions), expected)


def test_plan_must_match_outcome():
    goal_art = make_artifact("four_rooms")
    with pytest.raises(ValueError):
        rollout("four_rooms", goal_art, Unconditioned(), 0)
    with pytest.raises(ValueError):
        rollout("four_rooms", make_artifact("four_rooms", outcome="none"), FixedGoal((1.0, 1.0)), 0)
    with pytest.raises(EnvError):
        evaluate("point_reach", goal_art, n_rollouts=1)


def test_return_policy_needs_explicit_target():
    art = make_artifact("two_mode_line", outcome="avg_return", head="gaussian")
    with pytest.raises(ValueError):
        default_plan(art)
    plan = default_plan(art, 25.0)(0, 0)
    assert plan.value == 0.5
    with_cfg = make_artifact("two_mode_line", outcome="avg_return", head="gaussian", return_target=50.0)
    assert default_plan(with_cfg)(3, 0).value == 1.0


def test_aggregation_is_pure_and_csv_round_trips():
    art = make_artifact("four_rooms")
    rep = evaluate("four_rooms", art, n_rollouts=60, seed=2)
    again = EvalReport.from_records("four_rooms", list(rep.records), rep.plan)
    assert again.summary() == rep.summary()
    returns = np.array([r.episode_return for r in rep.records])
    assert rep.std_return == float(np.std(returns))
    assert rep.success_rate == 100.0 * np.mean([r.success for r in rep.records])
    shuffled = EvalReport.from_records("four_rooms", rep.records[::-1], rep.plan)
    assert shuffled.success_rate == rep.success_rate
    assert np.isclose(shuffled.mean_return, rep.mean_return, rtol=0, atol=1e-12)
    summary = read_eval_summary(rep.to_csv())
    assert summary["success_rate"] == rep.success_rate and summary["env_id"] == "four_rooms"
    assert len(rep.to_csv().splitlines()) == 7 + 1 + 60


def test_workers_do_not_change_results():
    art = make_artifact("four_rooms")
    one = evaluate("four_rooms", art, n_rollouts=120, seed=5, workers=1)
    two = evaluate("four_rooms", art, n_rollouts=120, seed=5, workers=2)
    assert one.to_csv() == two.to_csv()


def test_evaluate_is_deterministic_and_seed_sensitive():
    art = make_artifact("four_rooms")
    assert evaluate("four_rooms", art, n_rollouts=30, seed=1).to_csv() == \
        evaluate("four_rooms", art, n_rollouts=30, seed=1).to_csv()
    assert evaluate("four_rooms", art, n_rollouts=30, seed=1).to_csv() != \
        evaluate("four_rooms", art, n_rollouts=30, seed=2).to_csv()


@pytest.mark.parametrize("spec,expected", [
    ("0:50:5", [float(v) for v in range(0, 51, 5)]),
    ("1,2.5, 4", [1.0, 2.5, 4.0]),
    ("0:1:0.25", [0.0, 0.25, 0.5, 0.75, 1.0]),
])
def test_parse_range(spec, expected):
    assert parse_range(spec) == expected


@pytest.mark.parametrize("spec", ["0:1", "0:1:0", "5:1:1"])
def test_parse_range_rejects(spec):
    with pytest.raises(ValueError):
        parse_range(spec)


def test_reward_target_sweep_rows():
    art = make_artifact("two_mode_line", outcome="avg_return", head="gaussian")
    rows = reward_target_sweep("two_mode_line", art, parse_range("0:50:5"), n_per_target=4)
    assert len(rows) == 11
    assert [r["condition"] for r in rows] == [t / 50 for t in range(0, 51, 5)]
    with pytest.raises(ValueError):
        reward_target_sweep("four_rooms", make_artifact("four_rooms"), [1.0])


def _ordered_two_mode():
    # expert episodes first: the top 10% by return and by length are the same trajectories
    expert = collect_scripted("two_mode_line", "expert", 10, seed=0, noise=0.0)
    medium = collect_scripted("two_mode_line", "medium", 90, seed=0, noise=0.0)
    return concat_datasets([expert, medium])


def test_goal_pools_coincide_when_rankings_agree():
    pools = goal_pools(_ordered_two_mode(), "first")
    assert pools["reward_goal"] is not None
    assert np.array_equal(pools["reward_goal"], pools["length_goal"])
    assert len(pools["length_goal"]) == 10 * 5


def _rewardless(ds):
    trajs = tuple(Trajectory(t.states, t.actions, np.zeros(len(t))) for t in ds)
    return Dataset(ds.env_id, ds.horizon, trajs, "rewardless")


def test_goal_pools_without_reward():
    pools = goal_pools(_rewardless(collect_random("point_reach", 2000, 0)), "xy")
    assert pools["reward_goal"] is None and len(pools["length_goal"]) > 0


def test_goal_strategy_bookkeeping():
    ds = _ordered_two_mode()
    art = make_artifact("two_mode_line", head="gaussian", dataset_hash=ds.content_hash())
    res = goal_strategy_compare("two_mode_line", ds, art, n_rollouts=40, n_candidates=200, n_per_candidate=10)
    opt, length, reward = res["optimized_goal"], res["length_goal"], res["reward_goal"]
    assert opt.n_rollouts == 2000 and not opt.offline and opt.note
    assert length.offline and reward.offline and length.n_rollouts == 40
    assert opt.best_goal is not None
    assert opt.mean_return >= min(length.mean_return, reward.mean_return) - 1e-9
    none = goal_strategy_compare("point_reach", _rewardless(collect_random("point_reach", 500, 0)),
                                 make_artifact("point_reach", head="gaussian"), ("reward_goal",))
    assert not none["reward_goal"].available


def test_stitching_refuses_contaminated_dataset():
    env = get_env("stitch_maze")
    ds = concat_datasets([collect_scripted("stitch_maze", "corridor_AB", 5, 0),
                          collect_scripted("stitch_maze", "corridor_BC", 5, 0)])
    s = reset("stitch_maze", 0, goal=env.waypoint_c)
    states, actions = [], []
    while not s.done:
        a = env.expert_action(s)
        states.append(s.observation())
        actions.append(a)
        s, _, _ = step(s, a)
    bad = Dataset("stitch_maze", 50, ds.trajectories + (Trajectory(np.array(states), np.array(actions),
                                                                   np.zeros(len(states))),), "bad")
    art = make_artifact("stitch_maze", dataset_hash=bad.content_hash())
    with pytest.raises(StitchingAuditError):
        stitching_eval(art, bad, n_rollouts=5)
    ok = stitching_eval(make_artifact("stitch_maze", dataset_hash=ds.content_hash()), ds,
                        make_artifact("stitch_maze", outcome="none", dataset_hash=ds.content_hash()), n_rollouts=5)
    assert ok.audit_passed and ok.rvs.n_rollouts == 5 and ok.bc_success is not None
    assert all(r.goal == env.waypoint_c for r in ok.rvs.records)
