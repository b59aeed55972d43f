"""Command-line entry points: data generation, model fitting, experiments, serving."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import runner as runner_mod
from . import workload as workload_mod
from .simenv import generate_food_dataset, save_food_dataset
from .study import build_training_pairs, generate_synthetic_study, load_study, population_profile, save_study


def _cmd_gen_study(args) -> int:
    profile = population_profile(args.profile, participants=args.participants, noise_scale=args.noise)
    conditions = generate_synthetic_study(profile, seed=args.seed)
    save_study(args.out, conditions, profile_name=profile.name)
    events = sum(len(c.events) for c in conditions)
    print(f"wrote {len(conditions)} conditions / {events} query events to {args.out}")
    return 0


def _cmd_gen_foods(args) -> int:
    dataset = generate_food_dataset(
        seed=args.seed, context_dim=args.dim, n_types=args.types, n_trials=args.trials
    )
    save_food_dataset(args.out, dataset)
    print(f"wrote {len(dataset.foods)} food types x {args.trials} trials to {args.out}")
    return 0


_VARIANTS = {v.value: v for v in workload_mod.GrangerVariant}


def _cmd_fit_workload(args) -> int:
    conditions = load_study(args.data)
    samples = build_training_pairs(conditions, history_len=args.history)
    if args.variant == "exp_impulse":
        model = workload_mod.fit_exp_impulse(samples)
    else:
        variant = _VARIANTS[args.variant]
        ridge = None
        if variant in (workload_mod.GrangerVariant.RIDGE, workload_mod.GrangerVariant.RIDGE_NONNEG):
            if args.ridge is None:
                print("error: ridge variants need --ridge auto or --ridge VALUE", file=sys.stderr)
                return 2
            if args.ridge == "auto":
                spec = workload_mod.ModelSpec(
                    kind="granger", variant=variant, history_len=args.history, ridge_lambda="auto"
                )
                report = workload_mod.cross_validate(samples, spec, folds=5)
                ridge = sorted(report.selected_lambdas)[len(report.selected_lambdas) // 2]
                print(f"selected ridge lambda {ridge:g} (per-fold picks {report.selected_lambdas})")
            else:
                ridge = float(args.ridge)
        model = workload_mod.fit_granger(samples, variant, args.history, ridge_lambda=ridge)
    workload_mod.save_model(args.out, model, data_fingerprint=workload_mod.fingerprint_samples(samples))
    print(f"fit {args.variant} on {len(samples)} samples -> {args.out}")
    return 0


def _cmd_model_zoo(args) -> int:
    conditions = load_study(args.data)
    rows = []
    for spec in workload_mod.model_zoo_specs():
        history = spec.history_len or 1
        samples = build_training_pairs(conditions, history_len=history)
        report = workload_mod.cross_validate(
            samples,
            spec,
            folds=args.folds,
            grouped_by_participant=not args.ungrouped,
            seed=args.seed,
        )
        rows.append((spec.label, spec.history_len or 0, report))
        print(f"{spec.label:28s} mean {report.mean:12.6g}  median {report.median:12.6g}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# schema=hilbandit-model-zoo v1\n")
        fh.write(f"# folds={args.folds} grouped={not args.ungrouped} seed={args.seed}\n")
        fh.write("model,history,mean_mse,std_mse,median_mse\n")
        for label, history, report in rows:
            fh.write(f"{label},{history},{report.mean:.6g},{report.std:.6g},{report.median:.6g}\n")
    best = workload_mod.select_model([r for _, _, r in rows])
    print(f"selected by median test MSE: {best.label}")
    print(f"wrote {args.out}")
    return 0


def _cmd_run(args) -> int:
    config = runner_mod.load_config(args.config)
    jobs = args.jobs if args.jobs is not None else int(os.environ.get(runner_mod.ENV_JOBS, "1"))
    results = runner_mod.run_experiment(config, jobs=jobs)
    written = runner_mod.emit_tables(results)
    print(f"ran {len(config.workload_settings)} settings x {len(config.policies)} policies")
    print(f"wrote {len(written)} files under {config.output_dir}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    static = args.static_dir
    if static is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        static = candidate if candidate.is_dir() else None
    app = create_app(args.data_dir, static_dir=static, capacity=args.capacity)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hilbandit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-study", help="generate a synthetic querying-workload study")
    p.add_argument("--profile", choices=("d1", "d2", "d12"), required=True)
    p.add_argument("--participants", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_study)

    p = sub.add_parser("gen-foods", help="generate the synthetic food dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--types", type=int, default=16)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_foods)

    p = sub.add_parser("fit-workload", help="fit one workload model on a study file")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=sorted(_VARIANTS) + ["exp_impulse"], required=True)
    p.add_argument("--history", type=int, default=10)
    p.add_argument("--ridge", default=None, help="'auto' or a numeric lambda")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_workload)

    p = sub.add_parser("model-zoo", help="cross-validate the full model zoo on a study file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ungrouped", action="store_true", help="ignore participant grouping")
    p.set_defaults(func=_cmd_model_zoo)

    p = sub.add_parser("run", help="run a configured experiment sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("serve", help="serve live human-in-the-loop sessions")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--static-dir", default=None)
    p.add_argument("--capacity", type=int, default=64)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
