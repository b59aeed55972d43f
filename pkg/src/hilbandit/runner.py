"""Configuration-driven experiment harness.

One run: generate the food dataset, pretrain the bandit on the pretraining
split, validate each querying policy's hyperparameter on the validation
split (argmax mean weighted metric per w_task), then evaluate the selected
candidates on the test split across seeds and emit CSV tables plus full
episode traces. Everything derives from the config, so a rerun overwrites
byte-identical outputs.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bandit import BanditModel, PolicyConfig
from .metrics import AggregateStats, EpisodeMetrics, aggregate, compute_metrics, format_mean_std
from .simenv import (
    EpisodeConfig,
    EpisodeTrace,
    FoodDataset,
    generate_food_dataset,
    pretraining_samples,
    run_episode,
    save_trace,
)
from .workload import load_model, make_floor_model

# spawn-key tags for the counter-based seed splitter
_TAG_ENV = 0
_TAG_POLICY = 1
_TAG_FOODSEQ = 2
_TAG_PRETRAIN = 3
_PHASES = ("validation", "test")

METRIC_KEYS = ("r_task_avg", "m_wt", "f_q", "delta_wl", "t_conv", "f_fail_food", "f_auto_food")

CONFIG_SCHEMA = "hilbandit-experiment"
CONFIG_SCHEMA_VERSION = 1

ENV_OUTPUT_DIR = "HILBANDIT_OUTPUT_DIR"
ENV_JOBS = "HILBANDIT_JOBS"


class ConfigError(Exception):
    """Invalid experiment configuration; message carries the field path."""


def child_seed(root: int, *key: int) -> int:
    """Deterministic child seed from a root and an integer key path."""
    ss = np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class WorkloadSetting:
    name: str
    policy_model: object
    evaluation_model: object


@dataclass(frozen=True)
class PolicyGrid:
    kind: str
    candidates: tuple[float, ...] = ()

    @property
    def needs_search(self) -> bool:
        return self.kind in ("exp_decay", "query_gap")

    @property
    def uses_policy_randomness(self) -> bool:
        return self.kind == "exp_decay"


@dataclass(frozen=True)
class ExperimentConfig:
    root_seed: int
    eval_seeds: tuple[int, ...]
    policy_seeds: tuple[int, ...]
    dataset_spec: dict
    n_foods: int
    max_attempts: int
    initial_workload: float
    alpha: float
    reg_lambda: float
    update_on_query: bool
    workload_settings: tuple[WorkloadSetting, ...]
    policies: tuple[PolicyGrid, ...]
    w_task_grid: tuple[float, ...]
    output_dir: str
    bandit_checkpoint: str | None = None  # absolute path; skips pretraining


def _resolve_model(ref, path_field: str, base_dir: Path):
    if not isinstance(ref, dict):
        raise ConfigError(f"{path_field}: expected an object")
    if "path" in ref:
        return load_model(base_dir / ref["path"])
    if "floor_scale" in ref:
        return make_floor_model(
            impact_scale=float(ref["floor_scale"]), history_len=int(ref.get("history_len", 10))
        )
    raise ConfigError(f"{path_field}: needs either 'path' or 'floor_scale'")


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    """Parse and validate a JSON experiment config.

    The HILBANDIT_OUTPUT_DIR environment variable overrides the config's
    output directory without touching the file.
    """
    env = dict(os.environ if env is None else env)
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    if raw.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"schema: expected {CONFIG_SCHEMA!r}, got {raw.get('schema')!r}")
    if raw.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported {raw.get('schema_version')!r}")

    def need(obj, key, where):
        if key not in obj:
            raise ConfigError(f"{where}.{key}: missing")
        return obj[key]

    dataset = need(raw, "dataset", "config")
    episode = raw.get("episode", {})
    bandit = raw.get("bandit", {})

    settings = []
    for i, entry in enumerate(raw.get("workload_settings", [])):
        where = f"workload_settings[{i}]"
        name = need(entry, "name", where)
        policy_model = _resolve_model(need(entry, "policy_model", where), f"{where}.policy_model", path.parent)
        eval_ref = entry.get("evaluation_model")
        evaluation = (
            _resolve_model(eval_ref, f"{where}.evaluation_model", path.parent)
            if eval_ref is not None
            else policy_model
        )
        settings.append(
            WorkloadSetting(name=name, policy_model=policy_model, evaluation_model=evaluation)
        )
    if not settings:
        raise ConfigError("workload_settings: must not be empty")

    policies = []
    for i, entry in enumerate(raw.get("policies", [])):
        where = f"policies[{i}]"
        kind = need(entry, "kind", where)
        if kind not in ("linucb", "always_query", "exp_decay", "query_gap"):
            raise ConfigError(f"{where}.kind: unknown policy {kind!r}")
        candidates = tuple(float(c) for c in entry.get("candidates", ()))
        grid = PolicyGrid(kind=kind, candidates=candidates)
        if grid.needs_search and not candidates:
            raise ConfigError(f"{where}.candidates: must be nonempty for {kind}")
        policies.append(grid)
    if not policies:
        raise ConfigError("policies: must not be empty")

    w_task_grid = tuple(float(w) for w in raw.get("w_task_grid", (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)))
    if not w_task_grid:
        raise ConfigError("w_task_grid: must not be empty")

    eval_seeds = tuple(int(s) for s in need(raw, "eval_seeds", "config"))
    if not eval_seeds:
        raise ConfigError("eval_seeds: must not be empty")
    policy_seeds = tuple(int(s) for s in raw.get("policy_seeds", (0, 1, 2, 3, 4)))

    output_dir = env.get(ENV_OUTPUT_DIR) or raw.get("output_dir", "out")
    checkpoint = bandit.get("checkpoint")
    if checkpoint is not None:
        checkpoint = str(path.parent / checkpoint)

    return ExperimentConfig(
        root_seed=int(need(raw, "root_seed", "config")),
        eval_seeds=eval_seeds,
        policy_seeds=policy_seeds,
        dataset_spec={
            "seed": int(need(dataset, "seed", "dataset")),
            "context_dim": int(dataset.get("context_dim", 32)),
            "n_types": int(dataset.get("n_types", 16)),
            "n_trials": int(dataset.get("n_trials", 30)),
            "context_noise": float(dataset.get("context_noise", 0.05)),
        },
        n_foods=int(episode.get("n_foods", 5)),
        max_attempts=int(episode.get("max_attempts", 10)),
        initial_workload=float(episode.get("initial_workload", 0.5)),
        alpha=float(bandit.get("alpha", 0.5)),
        reg_lambda=float(bandit.get("reg_lambda", 1.0)),
        update_on_query=bool(bandit.get("update_on_query", True)),
        workload_settings=tuple(settings),
        policies=tuple(policies),
        w_task_grid=w_task_grid,
        output_dir=str(output_dir),
        bandit_checkpoint=checkpoint,
    )


def _food_sequence(dataset: FoodDataset, split: str, config: ExperimentConfig, phase_idx: int, eval_seed: int):
    ids = dataset.type_ids(split)
    rng = np.random.default_rng(
        np.random.SeedSequence(config.root_seed, spawn_key=(_TAG_FOODSEQ, phase_idx, eval_seed))
    )
    return tuple(int(t) for t in rng.choice(ids, size=config.n_foods, replace=True))


def _metrics_dict(metrics_by_wtask: dict[float, EpisodeMetrics]) -> dict[float, dict[str, float]]:
    return {
        w: {
            "r_task_avg": m.r_task_avg,
            "m_wt": m.m_wt,
            "f_q": m.f_q,
            "delta_wl": m.delta_wl,
            "t_conv": m.t_conv_mean,
            "f_fail_food": m.f_fail_food,
            "f_auto_food": m.f_auto_food,
        }
        for w, m in metrics_by_wtask.items()
    }


def _average_dicts(dicts: Sequence[dict[float, dict[str, float]]]) -> dict[float, dict[str, float]]:
    out: dict[float, dict[str, float]] = {}
    for w in dicts[0]:
        out[w] = {
            k: float(np.mean([d[w][k] for d in dicts])) for k in dicts[0][w]
        }
    return out


@dataclass
class CellRun:
    """All episodes of one (setting, policy, candidate, phase, eval seed)."""

    per_wtask: dict[float, dict[str, float]]  # averaged over policy seeds
    trace: EpisodeTrace  # trace of the first policy seed


def _policy_config(grid: PolicyGrid, candidate: float | None) -> PolicyConfig:
    if grid.kind == "exp_decay":
        return PolicyConfig(kind="exp_decay", decay_rate=float(candidate))
    if grid.kind == "query_gap":
        return PolicyConfig(kind="query_gap", gap_scale=float(candidate))
    return PolicyConfig(kind=grid.kind)


def _run_cell(
    dataset: FoodDataset,
    pretrained: BanditModel,
    config: ExperimentConfig,
    setting: WorkloadSetting,
    grid: PolicyGrid,
    candidate: float | None,
    phase: str,
    eval_seed: int,
) -> CellRun:
    phase_idx = _PHASES.index(phase)
    split = "validation" if phase == "validation" else "test"
    decision_model = setting.policy_model
    # Validation scores candidates under the policy's own workload model;
    # the (possibly different) evaluation model applies only at test time.
    evaluation_model = setting.policy_model if phase == "validation" else setting.evaluation_model
    episode_config = EpisodeConfig(
        food_sequence=_food_sequence(dataset, split, config, phase_idx, eval_seed),
        policy=_policy_config(grid, candidate),
        decision_model=decision_model,
        evaluation_model=evaluation_model,
        max_attempts=config.max_attempts,
        initial_workload=config.initial_workload,
        update_on_query=config.update_on_query,
    )
    env_seed = child_seed(config.root_seed, _TAG_ENV, phase_idx, eval_seed)
    policy_seeds = config.policy_seeds if grid.uses_policy_randomness else config.policy_seeds[:1]
    per_seed = []
    first_trace: EpisodeTrace | None = None
    for ps_index, _ in enumerate(policy_seeds):
        policy_seed = child_seed(config.root_seed, _TAG_POLICY, phase_idx, eval_seed, ps_index)
        trace = run_episode(dataset, pretrained, episode_config, env_seed, policy_seed)
        if first_trace is None:
            first_trace = trace
        per_seed.append(
            _metrics_dict({w: compute_metrics(trace, w) for w in config.w_task_grid})
        )
    return CellRun(per_wtask=_average_dicts(per_seed), trace=first_trace)


@dataclass
class MethodResult:
    grid: PolicyGrid
    validation: dict[float, dict[float, AggregateStats]] = field(default_factory=dict)
    selected: dict[float, float | None] = field(default_factory=dict)
    test: dict[float, dict[float | None, dict[str, AggregateStats]]] = field(default_factory=dict)
    test_traces: dict[tuple[float | None, int], EpisodeTrace] = field(default_factory=dict)


@dataclass
class ExperimentResults:
    config: ExperimentConfig
    methods: dict[tuple[str, str], MethodResult]  # (setting, policy kind)


def _cell_args(config, dataset, pretrained):
    """Enumerate every episode cell once; used by both serial and pool paths."""
    cells = []
    for setting in config.workload_settings:
        for grid in config.policies:
            candidates = grid.candidates if grid.needs_search else (None,)
            for candidate in candidates:
                phases = ["validation", "test"] if grid.needs_search else ["test"]
                for phase in phases:
                    for eval_seed in config.eval_seeds:
                        cells.append(
                            (dataset, pretrained, config, setting, grid, candidate, phase, eval_seed)
                        )
    return cells


def _run_cell_star(args):
    return _run_cell(*args)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentResults:
    """Execute the full sweep; deterministic regardless of job count."""
    dataset = generate_food_dataset(**config.dataset_spec)
    if config.bandit_checkpoint is not None:
        pretrained = BanditModel.load(config.bandit_checkpoint)
        if pretrained.context_dim != config.dataset_spec["context_dim"]:
            raise ConfigError(
                f"bandit.checkpoint: dimension {pretrained.context_dim} does not match "
                f"the dataset's {config.dataset_spec['context_dim']}"
            )
    else:
        pretrain_seed = child_seed(config.root_seed, _TAG_PRETRAIN)
        pretrained = BanditModel(
            context_dim=config.dataset_spec["context_dim"],
            alpha=config.alpha,
            reg_lambda=config.reg_lambda,
        ).pretrain(pretraining_samples(dataset, seed=pretrain_seed))

    cells = _cell_args(config, dataset, pretrained)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_star, cells, chunksize=1))
    else:
        outcomes = [_run_cell(*args) for args in cells]
    by_key: dict[tuple, CellRun] = {}
    for args, outcome in zip(cells, outcomes):
        _, _, _, setting, grid, candidate, phase, eval_seed = args
        by_key[(setting.name, grid.kind, candidate, phase, eval_seed)] = outcome

    results = ExperimentResults(config=config, methods={})
    for setting in config.workload_settings:
        for grid in config.policies:
            method = MethodResult(grid=grid)
            candidates = grid.candidates if grid.needs_search else (None,)
            # Hyperparameter selection on the validation split, per w_task.
            for w in config.w_task_grid:
                if grid.needs_search:
                    per_candidate: dict[float, AggregateStats] = {}
                    for candidate in candidates:
                        vals = [
                            by_key[(setting.name, grid.kind, candidate, "validation", s)].per_wtask[w]["m_wt"]
                            for s in config.eval_seeds
                        ]
                        per_candidate[candidate] = aggregate(vals)
                    method.validation[w] = per_candidate
                    best = max(candidates, key=lambda c: per_candidate[c].mean)
                    method.selected[w] = best
                else:
                    method.selected[w] = None
                method.test[w] = {}
                for candidate in candidates:
                    stats: dict[str, AggregateStats] = {}
                    for key in METRIC_KEYS:
                        stats[key] = aggregate(
                            [
                                by_key[(setting.name, grid.kind, candidate, "test", s)].per_wtask[w][key]
                                for s in config.eval_seeds
                            ]
                        )
                    method.test[w][candidate] = stats
            for candidate in candidates:
                for eval_seed in config.eval_seeds:
                    method.test_traces[(candidate, eval_seed)] = by_key[
                        (setting.name, grid.kind, candidate, "test", eval_seed)
                    ].trace
            results.methods[(setting.name, grid.kind)] = method
    return results


def _fmt_candidate(candidate: float | None) -> str:
    return "-" if candidate is None else f"{candidate:g}"


def emit_tables(results: ExperimentResults, output_dir: str | Path | None = None) -> list[Path]:
    """Write per-(setting, w_task) metric tables, the validation log, and traces."""
    config = results.config
    outdir = Path(output_dir if output_dir is not None else config.output_dir)
    tables_dir = outdir / "tables"
    traces_dir = outdir / "traces"
    tables_dir.mkdir(parents=True, exist_ok=True)
    traces_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    conventions = (
        "# mean ± std over evaluation seeds (std unbiased, ddof=1); "
        "exp_decay rows additionally average per-seed metrics over policy seeds\n"
        "# rank-test conventions for downstream analyses: exact enumeration for n <= 12, "
        "tie-corrected normal approximation with continuity correction otherwise; "
        "zero differences dropped before signed ranking\n"
    )

    for setting in config.workload_settings:
        for w in config.w_task_grid:
            path = tables_dir / f"{setting.name}_wtask_{w:g}.csv"
            lines = [
                f"# schema=hilbandit-table v1 setting={setting.name} w_task={w:g}\n",
                conventions,
                "method,selected,r_task_avg,m_wt,f_q,delta_wl,t_conv,f_fail_food,f_auto_food\n",
            ]
            for grid in config.policies:
                method = results.methods[(setting.name, grid.kind)]
                selected = method.selected[w]
                stats = method.test[w][selected]
                cells = ",".join(format_mean_std(stats[k]) for k in METRIC_KEYS)
                lines.append(f"{grid.kind},{_fmt_candidate(selected)},{cells}\n")
            path.write_text("".join(lines))
            written.append(path)

    validation_path = tables_dir / "validation.csv"
    lines = [
        "# schema=hilbandit-validation v1\n",
        conventions,
        "setting,method,candidate,w_task,mean_m_wt,std_m_wt,selected\n",
    ]
    for setting in config.workload_settings:
        for grid in config.policies:
            if not grid.needs_search:
                continue
            method = results.methods[(setting.name, grid.kind)]
            for w in config.w_task_grid:
                for candidate in grid.candidates:
                    stats = method.validation[w][candidate]
                    chosen = int(method.selected[w] == candidate)
                    lines.append(
                        f"{setting.name},{grid.kind},{candidate:g},{w:g},"
                        f"{stats.mean:.6f},{stats.std:.6f},{chosen}\n"
                    )
    validation_path.write_text("".join(lines))
    written.append(validation_path)

    for (setting_name, kind), method in sorted(results.methods.items()):
        for (candidate, eval_seed), trace in sorted(
            method.test_traces.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])
        ):
            name = f"{setting_name}__{kind}__c{_fmt_candidate(candidate)}__seed{eval_seed}.jsonl"
            path = traces_dir / name
            save_trace(path, trace)
            written.append(path)
    return written
