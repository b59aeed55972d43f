"""Acceptance suite: one test per release criterion, each printing a verdict line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; the suite is also part of the default pytest run.
"""

from __future__ import annotations

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from hilbandit import cli
from hilbandit.bandit import BanditModel, PolicyConfig
from hilbandit.metrics import aggregate, compute_metrics, mann_whitney_u, wilcoxon_signed_rank
from hilbandit.numerics import BoxConstraint, bvls, nnls, ridge_solve
from hilbandit.runner import child_seed, emit_tables, load_config, run_experiment
from hilbandit.simenv import (
    EpisodeConfig,
    generate_food_dataset,
    pretraining_samples,
    run_episode,
)
from hilbandit.study import (
    FEATURE_WIDTH,
    WorkloadSample,
    build_training_pairs,
    generate_synthetic_study,
    population_profile,
)
from hilbandit.workload import (
    GrangerModel,
    GrangerVariant,
    ModelSpec,
    cross_validate,
    fit_granger,
    make_floor_model,
)

from oracles import (
    bvls_projected_gradient_batch,
    explicit_inverse_bonus,
    least_squares_objective,
    mann_whitney_exact_bruteforce,
    nnls_grid_objective,
    ridge_gradient_descent,
    wilcoxon_exact_bruteforce,
)

N_INSTANCES = 100
ORDERING_SEEDS = 64
GAP_SCALE = 1.0  # operating point for the query-gap policy in env checks


def verdict(name: str, detail: str) -> None:
    print(f"\n[PASS] {name}: {detail}")


# --------------------------------------------------------------------------
# Shared environment for the behavioural criteria


@pytest.fixture(scope="module")
def environment():
    dataset = generate_food_dataset(seed=21)
    pretrained = BanditModel(context_dim=32, alpha=0.5, reg_lambda=1.0)
    pretrained.pretrain(pretraining_samples(dataset, seed=child_seed(7, 3)))
    return dataset, pretrained


def evaluate_policy(dataset, pretrained, policy, decision_model, seeds, w_task=0.7, eval_model=None):
    test_ids = dataset.type_ids("test")
    rows = []
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence(s, spawn_key=(9,)))
        sequence = tuple(int(t) for t in rng.choice(test_ids, size=5, replace=True))
        config = EpisodeConfig(
            food_sequence=sequence,
            policy=policy,
            decision_model=decision_model,
            evaluation_model=eval_model,
            max_attempts=10,
            initial_workload=0.5,
        )
        trace = run_episode(
            dataset, pretrained, config, env_seed=child_seed(7, 0, 1, s), policy_seed=0
        )
        rows.append(compute_metrics(trace, w_task))
    return rows


def two_se_gap(a, b) -> float:
    """Significance bar for mean(a) - mean(b)."""
    return 2.0 * float(np.sqrt(a.sem**2 + b.sem**2))


# --------------------------------------------------------------------------
# Criterion: solver oracles


def test_solver_oracles_within_tolerance():
    started = time.monotonic()
    rng = np.random.default_rng(2024)

    for _ in range(N_INSTANCES):
        x = rng.normal(size=(8, 3))
        y = rng.normal(size=8)
        expected = ridge_gradient_descent(x, y, 0.1)
        np.testing.assert_allclose(ridge_solve(x, y, 0.1), expected, atol=1e-6)

    for _ in range(N_INSTANCES):
        x = rng.normal(size=(6, 2))
        y = x @ rng.uniform(0.2, 2.0, size=2) + 0.1 * rng.normal(size=6)
        theta = nnls(x, y)
        assert np.all(theta >= 0) and np.all(theta < 2.9)
        assert least_squares_objective(x, y, theta) <= nnls_grid_objective(x, y) + 1e-6

    xs = rng.normal(size=(N_INSTANCES, 8, 3))
    ys = rng.normal(size=(N_INSTANCES, 8))
    oracle_thetas = bvls_projected_gradient_batch(xs, ys, 0.05, 1.0, iters=100_000)
    box = BoxConstraint.uniform(3, 0.05, 1.0)
    for x, y, oracle_theta in zip(xs, ys, oracle_thetas):
        theta = bvls(x, y, box)
        assert (
            least_squares_objective(x, y, theta)
            <= least_squares_objective(x, y, oracle_theta) + 1e-5
        )

    model = BanditModel(context_dim=6)
    model.pretrain(
        [(rng.normal(size=6), int(rng.integers(6)), float(rng.integers(2))) for _ in range(60)]
    )
    for _ in range(N_INSTANCES):
        x = rng.normal(size=6)
        scores = model.ucb(x)
        action = int(rng.integers(6))
        assert scores.bonuses[action] == pytest.approx(
            explicit_inverse_bonus(model.grams[action], x), abs=1e-8
        )

    elapsed = time.monotonic() - started
    assert elapsed < 30.0, f"solver oracle suite took {elapsed:.1f}s (budget 30s)"
    verdict(
        "solver-oracles",
        f"ridge@1e-6, nnls@1e-6, bvls@1e-5, ucb-bonus@1e-8 on {N_INSTANCES} instances each "
        f"({elapsed:.1f}s)",
    )


# --------------------------------------------------------------------------
# Criterion: model recovery


def test_model_recovery():
    rng = np.random.default_rng(31)
    true = GrangerModel(
        gamma=0.7,
        lag_weights=rng.uniform(0.0, 0.02, size=(5, FEATURE_WIDTH)),
        bias=0.2,
        history_len=5,
        variant=GrangerVariant.PLAIN,
        clamp_output=False,
    )
    samples = []
    for i in range(400):
        wl0 = float(rng.uniform(0, 1))
        feats = rng.normal(size=5 * FEATURE_WIDTH)
        samples.append(
            WorkloadSample(
                initial_workload=wl0,
                features=feats,
                target=true.predict(wl0, feats, clamp=False),
                group_key=f"g{i % 8}",
                condition_id=f"c{i}",
                event_timestep=i,
            )
        )
    fitted = fit_granger(samples, GrangerVariant.PLAIN, 5)
    assert fitted.gamma == pytest.approx(true.gamma, abs=1e-6)
    np.testing.assert_allclose(fitted.lag_weights, true.lag_weights, atol=1e-6)
    assert fitted.bias == pytest.approx(true.bias, abs=1e-6)

    profile = population_profile("d1", participants=6)
    study_samples = build_training_pairs(generate_synthetic_study(profile, 3), history_len=10)
    box_model = fit_granger(study_samples, GrangerVariant.BOX_SIM, 10)
    assert 0.05 <= box_model.gamma <= 1.0
    assert np.all(box_model.lag_weights >= 0.05) and np.all(box_model.lag_weights <= 1.0)
    assert box_model.bias <= 1.0

    oracle = [
        WorkloadSample(
            initial_workload=0.1 * (1 + g),
            features=np.zeros(FEATURE_WIDTH),
            target=0.1 * (1 + g),
            group_key=f"g{g}",
            condition_id=f"c{g}-{i}",
            event_timestep=i,
        )
        for g in range(6)
        for i in range(4)
    ]
    report = cross_validate(oracle, ModelSpec(kind="constant"))
    assert report.fold_mses == (0.0, 0.0, 0.0, 0.0)
    verdict(
        "model-recovery",
        "plain Granger (H=5) coefficients to 1e-6; box fit exactly inside [0.05, 1]; "
        "constant-baseline CV is exactly zero on oracle data",
    )


# --------------------------------------------------------------------------
# Criterion: degenerate-policy identities


def test_degenerate_policy_identities(environment):
    dataset, pretrained = environment
    low = make_floor_model(1.0, 10)

    linucb_rows = evaluate_policy(
        dataset, pretrained, PolicyConfig(kind="linucb"), low, seeds=10
    )
    assert all(m.f_q == 0.0 for m in linucb_rows)

    aq_rows = evaluate_policy(
        dataset, pretrained, PolicyConfig(kind="always_query"), low, seeds=10
    )
    assert all(m.f_q == 1.0 for m in aq_rows)

    test_ids = dataset.type_ids("test")
    for s in range(10):
        rng = np.random.default_rng(np.random.SeedSequence(s, spawn_key=(9,)))
        sequence = tuple(int(t) for t in rng.choice(test_ids, size=5, replace=True))

        def run(policy):
            config = EpisodeConfig(
                food_sequence=sequence,
                policy=policy,
                decision_model=low,
                max_attempts=10,
                initial_workload=0.5,
            )
            return run_episode(dataset, pretrained, config, env_seed=child_seed(7, 0, 1, s))

        a = run(PolicyConfig(kind="linucb"))
        b = run(PolicyConfig(kind="query_gap", gap_scale=1e12))
        assert [s.action for s in a.steps] == [s.action for s in b.steps]
        for sa, sb in zip(a.steps, b.steps):
            assert sa.context.tobytes() == sb.context.tobytes()
    verdict(
        "degenerate-policies",
        "f_q(linucb)=0 and f_q(always_query)=1 exactly; query_gap at w=1e12 replays "
        "linucb's actions on identical contexts",
    )


# --------------------------------------------------------------------------
# Criterion: qualitative ordering (headline-table shape)


def test_qualitative_ordering(environment):
    started = time.monotonic()
    dataset, pretrained = environment
    low = make_floor_model(1.0, 10)

    aq = evaluate_policy(
        dataset, pretrained, PolicyConfig(kind="always_query"), low, seeds=ORDERING_SEEDS
    )
    qg = evaluate_policy(
        dataset,
        pretrained,
        PolicyConfig(kind="query_gap", gap_scale=GAP_SCALE),
        low,
        seeds=ORDERING_SEEDS,
    )
    lin = evaluate_policy(
        dataset, pretrained, PolicyConfig(kind="linucb"), low, seeds=ORDERING_SEEDS
    )

    r_aq = aggregate([m.r_task_avg for m in aq])
    r_qg = aggregate([m.r_task_avg for m in qg])
    r_lin = aggregate([m.r_task_avg for m in lin])
    f_qg = aggregate([m.f_q for m in qg])

    assert r_aq.mean - r_qg.mean > two_se_gap(r_aq, r_qg), (
        f"always_query {r_aq.mean:.3f} vs query_gap {r_qg.mean:.3f} "
        f"(bar {two_se_gap(r_aq, r_qg):.3f})"
    )
    assert r_qg.mean - r_lin.mean > two_se_gap(r_qg, r_lin), (
        f"query_gap {r_qg.mean:.3f} vs linucb {r_lin.mean:.3f} "
        f"(bar {two_se_gap(r_qg, r_lin):.3f})"
    )
    assert 0.0 < f_qg.mean < 1.0
    elapsed = time.monotonic() - started
    assert elapsed < 300.0, f"ordering check took {elapsed:.0f}s (budget 5 min)"
    verdict(
        "qualitative-ordering",
        f"r_task: always_query {r_aq.mean:.3f} > query_gap {r_qg.mean:.3f} > "
        f"linucb {r_lin.mean:.3f} with 2-SE gaps over {ORDERING_SEEDS} seeds; "
        f"f_q(query_gap)={f_qg.mean:.3f} strictly inside (0,1) ({elapsed:.0f}s)",
    )


# --------------------------------------------------------------------------
# Criterion: workload sensitivity


def test_workload_sensitivity(environment):
    dataset, pretrained = environment
    low = make_floor_model(1.0, 10)
    high = make_floor_model(2.0, 10)  # only the lag weights differ (2x)
    np.testing.assert_allclose(high.lag_weights, 2.0 * low.lag_weights)
    assert high.gamma == low.gamma and high.bias == low.bias

    policy = PolicyConfig(kind="query_gap", gap_scale=GAP_SCALE)
    on_low = evaluate_policy(dataset, pretrained, policy, low, seeds=ORDERING_SEEDS)
    on_high = evaluate_policy(dataset, pretrained, policy, high, seeds=ORDERING_SEEDS)
    f_low = aggregate([m.f_q for m in on_low])
    f_high = aggregate([m.f_q for m in on_high])
    assert f_high.mean < f_low.mean
    assert f_low.mean - f_high.mean > two_se_gap(f_low, f_high)
    verdict(
        "workload-sensitivity",
        f"f_q drops from {f_low.mean:.3f} to {f_high.mean:.3f} under the 2x-impact "
        f"model (bar {two_se_gap(f_low, f_high):.3f}, {ORDERING_SEEDS} seeds)",
    )


# --------------------------------------------------------------------------
# Criterion: cross-model harness


def cross_model_config_dict(outdir: str) -> dict:
    return {
        "schema": "hilbandit-experiment",
        "schema_version": 1,
        "root_seed": 7,
        "eval_seeds": list(range(32)),
        "policy_seeds": [0],
        "dataset": {"seed": 21, "context_dim": 32, "n_types": 16, "n_trials": 30},
        "episode": {"n_foods": 5, "max_attempts": 10, "initial_workload": 0.5},
        "bandit": {"alpha": 0.5, "reg_lambda": 1.0},
        "workload_settings": [
            {
                "name": "mismatched",
                "policy_model": {"floor_scale": 1.0, "history_len": 10},
                "evaluation_model": {"floor_scale": 2.0, "history_len": 10},
            },
            {
                "name": "matched",
                "policy_model": {"floor_scale": 2.0, "history_len": 10},
            },
        ],
        "policies": [{"kind": "query_gap", "candidates": [GAP_SCALE]}],
        "w_task_grid": [0.4],
        "output_dir": outdir,
    }


def test_cross_model_harness(tmp_path):
    path = tmp_path / "cross.json"
    path.write_text(json.dumps(cross_model_config_dict(str(tmp_path / "out"))))
    config = load_config(path)

    mismatched_setting = config.workload_settings[0]
    assert mismatched_setting.policy_model is not mismatched_setting.evaluation_model
    np.testing.assert_allclose(
        mismatched_setting.evaluation_model.lag_weights,
        2.0 * mismatched_setting.policy_model.lag_weights,
    )

    results = run_experiment(config)
    emit_tables(results)
    mismatched = results.methods[("mismatched", "query_gap")].test[0.4][GAP_SCALE]["m_wt"]
    matched = results.methods[("matched", "query_gap")].test[0.4][GAP_SCALE]["m_wt"]
    bar = two_se_gap(matched, mismatched)
    assert matched.mean >= mismatched.mean
    assert matched.mean - mismatched.mean > bar, (
        f"matched {matched.mean:.3f} vs mismatched {mismatched.mean:.3f} (bar {bar:.3f})"
    )
    assert (tmp_path / "out" / "tables" / "mismatched_wtask_0.4.csv").exists()
    verdict(
        "cross-model-harness",
        f"distinct policy/evaluation models ran end to end; matched m_wt "
        f"{matched.mean:.3f} > mismatched {mismatched.mean:.3f} (bar {bar:.3f}, 32 seeds)",
    )


# --------------------------------------------------------------------------
# Criterion: statistics


def test_statistics_exact_and_approx():
    checked = 0
    for n in range(2, 9):
        for n1 in range(1, n):
            for combo in itertools.combinations(range(1, n + 1), n1):
                x = [float(v) for v in combo]
                y = [float(v) for v in range(1, n + 1) if v not in combo]
                for alt in ("less", "greater", "two_sided"):
                    mine = mann_whitney_u(x, y, alt, method="exact").pvalue
                    assert mine == pytest.approx(
                        mann_whitney_exact_bruteforce(x, y, alt), abs=1e-12
                    )
                    checked += 1
    for n in range(1, 9):
        magnitudes = [float(i + 1) for i in range(n)]
        for signs in itertools.product((1, -1), repeat=n):
            diffs = [s * m for s, m in zip(signs, magnitudes)]
            for alt in ("less", "greater", "two_sided"):
                mine = wilcoxon_signed_rank(diffs, alt, method="exact").pvalue
                assert mine == pytest.approx(wilcoxon_exact_bruteforce(diffs, alt), abs=1e-12)
                checked += 1

    rng = np.random.default_rng(99)
    for i in range(100):
        pooled = rng.permutation(50)[:12].astype(float)
        x, y = pooled[:6].tolist(), pooled[6:].tolist()
        alt = ("less", "greater", "two_sided")[i % 3]
        exact = mann_whitney_u(x, y, alt, method="exact").pvalue
        approx = mann_whitney_u(x, y, alt, method="approx").pvalue
        assert abs(exact - approx) <= 0.02
    for i in range(100):
        magnitudes = rng.permutation(40)[:10] + 1.0
        diffs = (magnitudes * rng.choice([-1.0, 1.0], size=10)).tolist()
        alt = ("less", "greater", "two_sided")[i % 3]
        exact = wilcoxon_signed_rank(diffs, alt, method="exact").pvalue
        approx = wilcoxon_signed_rank(diffs, alt, method="approx").pvalue
        assert abs(exact - approx) <= 0.02
    verdict(
        "statistics",
        f"exact paths match brute-force enumeration on {checked} exhaustive n<=8 inputs; "
        "approximations within 0.02 of exact on 100 random tieless instances per test",
    )


# --------------------------------------------------------------------------
# Criterion: determinism of the experiment CLI


def determinism_config_dict(outdir: str) -> dict:
    return {
        "schema": "hilbandit-experiment",
        "schema_version": 1,
        "root_seed": 13,
        "eval_seeds": [0, 1, 2],
        "policy_seeds": [0, 1],
        "dataset": {"seed": 5, "context_dim": 8, "n_types": 6, "n_trials": 6},
        "episode": {"n_foods": 3, "max_attempts": 5, "initial_workload": 0.5},
        "workload_settings": [
            {"name": "base", "policy_model": {"floor_scale": 1.0, "history_len": 10}}
        ],
        "policies": [
            {"kind": "linucb"},
            {"kind": "always_query"},
            {"kind": "exp_decay", "candidates": [0.5, 1.0]},
            {"kind": "query_gap", "candidates": [1.0, 4.0]},
        ],
        "w_task_grid": [0.4, 0.7],
        "output_dir": outdir,
    }


def test_run_cli_deterministic(tmp_path):
    def run_into(outdir: Path) -> dict[str, bytes]:
        config_path = tmp_path / f"config_{outdir.name}.json"
        config_path.write_text(json.dumps(determinism_config_dict(str(outdir))))
        assert cli.main(["run", "--config", str(config_path)]) == 0
        return {
            str(p.relative_to(outdir)): p.read_bytes()
            for p in sorted(outdir.rglob("*"))
            if p.is_file()
        }

    first = run_into(tmp_path / "run_a")
    second = run_into(tmp_path / "run_b")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], f"{name} differs between runs"
    n_csv = sum(1 for n in first if n.endswith(".csv"))
    n_traces = sum(1 for n in first if n.startswith("traces/"))
    verdict(
        "determinism",
        f"two `run --config` executions produced byte-identical outputs "
        f"({n_csv} CSVs, {n_traces} trace files)",
    )
