from __future__ import annotations

import numpy as np
import pytest

from hilbandit.bandit import QUERY_ACTION, BanditModel, PolicyConfig
from hilbandit.simenv import (
    EpisodeConfig,
    EpisodeEngine,
    EpisodeFinished,
    FoodDataset,
    FoodTrial,
    FoodType,
    UnknownContext,
    expert_action,
    generate_food_dataset,
    load_food_dataset,
    load_trace,
    pretraining_samples,
    replay_rewards,
    run_episode,
    save_food_dataset,
    save_trace,
)
from hilbandit.workload import make_floor_model


def tiny_dataset(success_rows, n_trials=3, dim=3) -> FoodDataset:
    """Hand-built foods with constant success probabilities per type."""
    foods = []
    for i, row in enumerate(success_rows):
        ctx = np.zeros(dim)
        ctx[0] = 1.0
        ctx[1] = float(i + 1)
        trials = tuple(
            FoodTrial(context=ctx.copy(), success=np.array(row, dtype=float))
            for _ in range(n_trials)
        )
        foods.append(FoodType(type_id=i, name=f"food-{i:02d}", split="test", trials=trials))
    return FoodDataset(context_dim=dim, foods=tuple(foods))


def basic_config(dataset, policy_kind="always_query", **kwargs) -> EpisodeConfig:
    return EpisodeConfig(
        food_sequence=kwargs.pop("food_sequence", tuple(range(len(dataset.foods)))),
        policy=PolicyConfig(kind=policy_kind, **kwargs.pop("policy_kwargs", {})),
        decision_model=kwargs.pop("decision_model", make_floor_model(1.0, 10)),
        **kwargs,
    )


class TestFoodDataset:
    def test_default_shape(self):
        ds = generate_food_dataset(seed=0)
        assert len(ds.foods) == 16
        assert all(len(f.trials) == 30 for f in ds.foods)
        assert all(t.success.shape == (6,) for f in ds.foods for t in f.trials)
        assert len(ds.type_ids("pretrain")) == 12
        assert len(ds.type_ids("validation")) == 2
        assert len(ds.type_ids("test")) == 2

    def test_zero_noise_shares_probabilities(self):
        ds = generate_food_dataset(seed=1, context_noise=0.0)
        for food in ds.foods:
            base = food.trials[0].success
            for trial in food.trials:
                np.testing.assert_array_equal(trial.success, base)

    def test_deterministic(self):
        a = generate_food_dataset(seed=7)
        b = generate_food_dataset(seed=7)
        for fa, fb in zip(a.foods, b.foods):
            for ta, tb in zip(fa.trials, fb.trials):
                assert ta.context.tobytes() == tb.context.tobytes()
                assert ta.success.tobytes() == tb.success.tobytes()

    def test_unique_best_action_on_average(self):
        ds = generate_food_dataset(seed=2)
        for food in ds.foods:
            means = np.mean([t.success for t in food.trials], axis=0)
            top = np.sort(means)
            assert top[-1] - top[-2] > 0.02

    def test_probabilities_clipped(self):
        ds = generate_food_dataset(seed=3)
        for food in ds.foods:
            for t in food.trials:
                assert np.all(t.success >= 0.02) and np.all(t.success <= 0.98)

    def test_io_round_trip(self, tmp_path):
        ds = generate_food_dataset(seed=4, n_types=6, n_trials=5)
        path = tmp_path / "foods.jsonl"
        save_food_dataset(path, ds)
        loaded = load_food_dataset(path)
        assert loaded.context_dim == ds.context_dim
        for fa, fb in zip(ds.foods, loaded.foods):
            assert fa.split == fb.split
            for ta, tb in zip(fa.trials, fb.trials):
                np.testing.assert_array_equal(ta.context, tb.context)
                np.testing.assert_array_equal(ta.success, tb.success)


class TestExpertOracle:
    def test_argmax(self):
        ds = tiny_dataset([[0.1, 0.9, 0.3, 0.2, 0.2, 0.1]])
        assert expert_action(ds, ds.foods[0].trials[0].context) == 1

    def test_tie_breaks_low_index(self):
        ds = tiny_dataset([[0.4] * 6])
        assert expert_action(ds, ds.foods[0].trials[0].context) == 0

    def test_unknown_context(self):
        ds = tiny_dataset([[0.4] * 6])
        with pytest.raises(UnknownContext):
            expert_action(ds, np.ones(3) * 99)

    def test_expert_dominates_every_trial(self):
        ds = generate_food_dataset(seed=5)
        for food in ds.foods:
            for trial in food.trials:
                a = expert_action(ds, trial.context)
                assert np.all(trial.success[a] >= trial.success)


class TestEpisodeMechanics:
    def test_certain_success_converges_immediately(self):
        ds = tiny_dataset([[0.98] * 6])
        config = basic_config(ds, policy_kind="linucb")
        trace = run_episode(ds, BanditModel(context_dim=3), config, env_seed=0)
        assert len(trace.steps) == 1
        assert trace.foods[0].converged and trace.foods[0].attempts == 1

    def test_impossible_food_fails_at_cap(self):
        ds = tiny_dataset([[0.0] * 6])
        config = basic_config(ds, policy_kind="always_query", max_attempts=10)
        trace = run_episode(ds, BanditModel(context_dim=3), config, env_seed=0)
        assert len(trace.steps) == 10
        assert trace.foods[0].failed and trace.foods[0].attempts == 10

    def test_converged_food_ends_with_reward_one(self):
        ds = generate_food_dataset(seed=6, n_types=6, n_trials=8)
        config = basic_config(
            ds, policy_kind="linucb", food_sequence=tuple(ds.type_ids("test")) * 2
        )
        trace = run_episode(ds, BanditModel(context_dim=32), config, env_seed=3)
        by_food: dict[int, list] = {}
        for s in trace.steps:
            by_food.setdefault(s.food_index, []).append(s)
        for idx, outcome in enumerate(trace.foods):
            steps = by_food[idx]
            assert len(steps) == outcome.attempts
            if outcome.converged:
                assert steps[-1].reward == 1
            else:
                assert outcome.attempts == config.max_attempts

    def test_always_query_capped_geometric_t_conv(self):
        ds = tiny_dataset([[0.5, 0.1, 0.1, 0.1, 0.1, 0.1]], n_trials=1)
        config = basic_config(ds, policy_kind="always_query", max_attempts=10)
        model = BanditModel(context_dim=3)
        n = 10_000
        t_convs = np.array(
            [
                run_episode(ds, model, config, env_seed=s).foods[0].attempts
                for s in range(n)
            ],
            dtype=float,
        )
        p, cap = 0.5, 10
        # survival sums: E[X] = sum P(X>k), E[X^2] = sum (2k+1) P(X>k)
        closed_form = sum((1 - p) ** k for k in range(cap))
        second = sum((2 * k + 1) * (1 - p) ** k for k in range(cap))
        var = second - closed_form**2
        assert abs(t_convs.mean() - closed_form) < 3 * np.sqrt(var / n)

    def test_query_commits_expert_until_converged(self):
        # expert action succeeds with p=0.5; the policy defers once and the
        # engine re-executes the expert answer on every later attempt
        ds = tiny_dataset([[0.5, 0.1, 0.1, 0.1, 0.1, 0.1]], n_trials=1)
        config = basic_config(ds, policy_kind="always_query", max_attempts=10)
        trace = run_episode(ds, BanditModel(context_dim=3), config, env_seed=11)
        assert all(s.action == 0 and s.deferred for s in trace.steps)
        assert sum(s.queried for s in trace.steps) == 1
        assert trace.steps[0].queried

    def test_linucb_never_queries(self):
        ds = generate_food_dataset(seed=8, n_types=8, n_trials=10)
        config = basic_config(ds, policy_kind="linucb", food_sequence=(6, 7, 6, 7, 6))
        trace = run_episode(ds, BanditModel(context_dim=32), config, env_seed=1)
        assert all(not s.deferred for s in trace.steps)
        assert all(not f.queried for f in trace.foods)

    def test_always_query_queries_every_food(self):
        ds = generate_food_dataset(seed=9, n_types=8, n_trials=10)
        config = basic_config(ds, policy_kind="always_query", food_sequence=(6, 7, 6))
        trace = run_episode(ds, BanditModel(context_dim=32), config, env_seed=2)
        assert all(f.queried for f in trace.foods)

    def test_no_query_episode_drops_workload(self):
        # gamma = 0.05, zero bias: with no queries WL_T = 0.025 -> delta -0.475
        ds = tiny_dataset([[0.98] * 6])
        config = basic_config(ds, policy_kind="linucb", initial_workload=0.5)
        trace = run_episode(ds, BanditModel(context_dim=3), config, env_seed=0)
        assert trace.final_workload == pytest.approx(0.025)
        assert trace.final_workload - trace.initial_workload == pytest.approx(-0.475)

    def test_expected_reward_logged_per_step(self):
        ds = tiny_dataset([[0.3, 0.7, 0.1, 0.1, 0.1, 0.1]], n_trials=1)
        config = basic_config(ds, policy_kind="always_query")
        trace = run_episode(ds, BanditModel(context_dim=3), config, env_seed=4)
        assert all(s.expected_reward == pytest.approx(0.7) for s in trace.steps)

    def test_query_history_aligns_with_first_deferrals(self):
        ds = generate_food_dataset(seed=10, n_types=8, n_trials=10)
        config = basic_config(ds, policy_kind="always_query", food_sequence=(6, 7, 6, 7))
        trace = run_episode(ds, BanditModel(context_dim=32), config, env_seed=5)
        queried_steps = [s.timestep for s in trace.steps if s.queried]
        assert [t for t, _ in trace.query_history] == queried_steps
        assert all(t < len(trace.steps) for t, _ in trace.query_history)

    def test_determinism(self):
        ds = generate_food_dataset(seed=11, n_types=8, n_trials=10)
        model = BanditModel(context_dim=32)
        model.pretrain(pretraining_samples(ds, seed=0))
        config = basic_config(
            ds,
            policy_kind="exp_decay",
            policy_kwargs={"decay_rate": 0.5},
            food_sequence=(6, 7, 6, 7, 6),
        )
        t1 = run_episode(ds, model, config, env_seed=42, policy_seed=7)
        t2 = run_episode(ds, model, config, env_seed=42, policy_seed=7)
        assert len(t1.steps) == len(t2.steps)
        for a, b in zip(t1.steps, t2.steps):
            assert a.context.tobytes() == b.context.tobytes()
            assert (a.action, a.reward, a.deferred, a.queried) == (
                b.action,
                b.reward,
                b.deferred,
                b.queried,
            )
        assert t1.final_workload == t2.final_workload

    def test_replay_reproduces_rewards(self):
        ds = generate_food_dataset(seed=12, n_types=8, n_trials=10)
        model = BanditModel(context_dim=32)
        config = basic_config(
            ds,
            policy_kind="query_gap",
            policy_kwargs={"gap_scale": 2.0},
            food_sequence=(6, 7, 6),
        )
        trace = run_episode(ds, model, config, env_seed=13)
        assert replay_rewards(ds, config, 13, trace) == [s.reward for s in trace.steps]

    def test_step_after_finish_raises(self):
        ds = tiny_dataset([[0.98] * 6])
        config = basic_config(ds, policy_kind="linucb")
        engine = EpisodeEngine(ds, config, np.random.default_rng(0))
        engine.step(0)
        with pytest.raises(EpisodeFinished):
            engine.step(0)

    def test_trace_io_round_trip(self, tmp_path):
        ds = generate_food_dataset(seed=13, n_types=8, n_trials=10)
        config = basic_config(ds, policy_kind="always_query", food_sequence=(6, 7))
        trace = run_episode(ds, BanditModel(context_dim=32), config, env_seed=3)
        path = tmp_path / "trace.jsonl"
        save_trace(path, trace)
        loaded = load_trace(path)
        assert loaded.final_workload == trace.final_workload
        assert loaded.query_history == [(t, tuple(q)) for t, q in trace.query_history]
        assert len(loaded.steps) == len(trace.steps)
        for a, b in zip(trace.steps, loaded.steps):
            assert a.context.tobytes() == b.context.tobytes()
            assert (a.action, a.reward, a.expected_reward) == (b.action, b.reward, b.expected_reward)


class TestEvaluationModelSplit:
    def test_distinct_policy_and_evaluation_models(self):
        ds = tiny_dataset([[0.5, 0.1, 0.1, 0.1, 0.1, 0.1]], n_trials=1)
        low = make_floor_model(1.0, 10)
        high = make_floor_model(2.0, 10)
        config = EpisodeConfig(
            food_sequence=(0,),
            policy=PolicyConfig(kind="always_query"),
            decision_model=low,
            evaluation_model=high,
        )
        trace = run_episode(ds, BanditModel(context_dim=3), config, env_seed=0)
        # final workload evaluated under the high-impact model
        t_final = len(trace.steps) - 1
        expected = high.predict_events(0.5, trace.query_history, t_final)
        assert trace.final_workload == pytest.approx(min(max(expected, 0.0), 1.0))
        assert trace.final_workload != pytest.approx(
            low.predict_events(0.5, trace.query_history, t_final)
        )


def test_config_validation():
    ds = tiny_dataset([[0.5] * 6])
    with pytest.raises(ValueError):
        EpisodeConfig(
            food_sequence=(),
            policy=PolicyConfig(kind="linucb"),
            decision_model=make_floor_model(),
        )
    with pytest.raises(ValueError):
        EpisodeConfig(
            food_sequence=(0,),
            policy=PolicyConfig(kind="linucb"),
            decision_model=make_floor_model(),
            max_attempts=0,
        )
