"""Predictive querying-workload models and their selection machinery.

The zoo contains lag-weighted linear (Granger-style) models in four
constraint variants, a continuous-time exponential-impulse model, and two
baselines. Models predict a workload score in [0, 1] from the initial
workload and the history of robot queries.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .numerics import BoxConstraint, SingularSystem, bvls, nnls, ridge_solve
from .study import FEATURE_WIDTH, WorkloadSample, featurize_history

RIDGE_LAMBDA_GRID = tuple(float(x) for x in np.logspace(-3, 2, 6))
EXP_IMPULSE_DECAY_GRID = tuple(float(x) for x in np.logspace(-3, 1, 25))
BOX_LOWER = 0.05
BOX_UPPER = 1.0
BOX_BIAS_LOWER = -10.0  # effectively unbounded at this data scale
BOX_BIAS_UPPER = 1.0


class HistoryWidthMismatch(Exception):
    """Feature block width disagrees with the model's history length."""


class NonMonotoneTimes(Exception):
    """Query times handed to a continuous-time model must strictly increase."""


class InsufficientGroups(Exception):
    """Grouped cross-validation needs at least one group per fold."""


class GrangerVariant(enum.Enum):
    PLAIN = "plain"
    NONNEG = "nonneg"
    RIDGE = "ridge"
    RIDGE_NONNEG = "ridge_nonneg"
    BOX_SIM = "box_sim"


_VARIANT_ORDER = {
    GrangerVariant.PLAIN: 0,
    GrangerVariant.NONNEG: 1,
    GrangerVariant.RIDGE: 2,
    GrangerVariant.RIDGE_NONNEG: 3,
    GrangerVariant.BOX_SIM: 4,
}

_NONNEG_VARIANTS = (GrangerVariant.NONNEG, GrangerVariant.RIDGE_NONNEG)
_RIDGE_VARIANTS = (GrangerVariant.RIDGE, GrangerVariant.RIDGE_NONNEG)


@dataclass(frozen=True)
class GrangerModel:
    """WL_t = gamma * WL_0 + sum_i w_i . phi_(t-i) + bias, optionally clamped."""

    gamma: float
    lag_weights: np.ndarray  # (history_len, 8)
    bias: float
    history_len: int
    variant: GrangerVariant
    ridge_lambda: float | None = None
    clamp_output: bool = True

    def __post_init__(self):
        weights = np.asarray(self.lag_weights, dtype=float).reshape(self.history_len, FEATURE_WIDTH)
        object.__setattr__(self, "lag_weights", weights)
        if self.variant in _NONNEG_VARIANTS:
            if self.gamma < 0 or np.any(weights < 0):
                raise ValueError("nonnegative variant requires gamma, weights >= 0")
        if self.variant is GrangerVariant.BOX_SIM:
            inside = BOX_LOWER <= self.gamma <= BOX_UPPER and np.all(
                (weights >= BOX_LOWER) & (weights <= BOX_UPPER)
            )
            if not inside or self.bias > BOX_BIAS_UPPER:
                raise ValueError("box_sim variant requires weights in [0.05, 1], bias <= 1")

    def predict(self, wl0: float, features, clamp: bool | None = None) -> float:
        features = np.asarray(features, dtype=float)
        if features.shape != (FEATURE_WIDTH * self.history_len,):
            raise HistoryWidthMismatch(
                f"expected {FEATURE_WIDTH * self.history_len} features, got {features.shape}"
            )
        value = self.gamma * wl0 + float(self.lag_weights.reshape(-1) @ features) + self.bias
        if clamp if clamp is not None else self.clamp_output:
            value = min(max(value, 0.0), 1.0)
        return value

    def predict_events(self, wl0, events, t, clamp=None) -> float:
        """Predict at timestep ``t`` from (timestep, feature-vector) queries."""
        return self.predict(wl0, featurize_history(events, t, self.history_len), clamp)


@dataclass(frozen=True)
class ExpImpulseModel:
    """Continuous-time workload: impulses at query times with exponential decay."""

    decay: float
    impulse: np.ndarray  # (8,)
    clamp_output: bool = True

    def __post_init__(self):
        if self.decay <= 0:
            raise ValueError("decay must be positive")
        object.__setattr__(self, "impulse", np.asarray(self.impulse, dtype=float).reshape(FEATURE_WIDTH))

    def predict(self, wl0: float, queries, t: float, clamp: bool | None = None) -> float:
        times = [q[0] for q in queries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise NonMonotoneTimes(f"query times must strictly increase, got {times}")
        value = wl0
        prev = 0.0
        for q_time, feats in queries:
            if q_time > t:
                break
            value = value * np.exp(-self.decay * (q_time - prev)) + float(
                self.impulse @ np.asarray(feats, dtype=float)
            )
            prev = q_time
        value = value * np.exp(-self.decay * (t - prev))
        if clamp if clamp is not None else self.clamp_output:
            value = min(max(value, 0.0), 1.0)
        return float(value)

    def predict_events(self, wl0, events, t, clamp=None) -> float:
        return self.predict(wl0, events, t, clamp)


@dataclass(frozen=True)
class ConstantModel:
    """Baseline: predicted workload is the initial workload."""

    clamp_output: bool = True

    def predict_events(self, wl0, events, t, clamp=None) -> float:
        return float(wl0)


@dataclass(frozen=True)
class AverageModel:
    """Baseline: predicted workload is the training-split target mean."""

    mean_target: float
    clamp_output: bool = True

    def predict_events(self, wl0, events, t, clamp=None) -> float:
        return float(self.mean_target)


def _design(samples: Sequence[WorkloadSample], history_len: int):
    width = FEATURE_WIDTH * history_len
    for s in samples:
        if s.features.shape != (width,):
            raise HistoryWidthMismatch(
                f"sample features have width {s.features.shape}, expected ({width},)"
            )
    wl0 = np.array([s.initial_workload for s in samples])
    blocks = np.stack([s.features for s in samples])
    y = np.array([s.target for s in samples])
    return wl0, blocks, y


def fit_granger(
    samples: Sequence[WorkloadSample],
    variant: GrangerVariant,
    history_len: int,
    ridge_lambda: float | None = None,
    clamp_output: bool = True,
) -> GrangerModel:
    """Fit one lag model; the variant decides constraints and regularization.

    The bias is never penalized or sign-constrained: constrained variants fit
    it by target centering, box_sim gives it a wide lower bound with the
    spec'd upper bound of 1.
    """
    if not samples:
        raise ValueError("need at least one sample")
    if variant in _RIDGE_VARIANTS and ridge_lambda is None:
        raise ValueError(f"{variant.value} requires ridge_lambda")
    wl0, blocks, y = _design(samples, history_len)
    z = np.column_stack([wl0, blocks])

    if variant is GrangerVariant.PLAIN:
        full = np.column_stack([z, np.ones(len(y))])
        theta = ridge_solve(full, y, 0.0)
        coeffs, bias = theta[:-1], float(theta[-1])
    elif variant is GrangerVariant.BOX_SIM:
        full = np.column_stack([z, np.ones(len(y))])
        lower = np.full(full.shape[1], BOX_LOWER)
        upper = np.full(full.shape[1], BOX_UPPER)
        lower[-1], upper[-1] = BOX_BIAS_LOWER, BOX_BIAS_UPPER
        theta = bvls(full, y, BoxConstraint(lower, upper))
        coeffs, bias = theta[:-1], float(theta[-1])
    else:
        centered = z - z.mean(axis=0)
        y_centered = y - y.mean()
        if variant is GrangerVariant.RIDGE:
            coeffs = ridge_solve(centered, y_centered, float(ridge_lambda))
        elif variant is GrangerVariant.NONNEG:
            coeffs = nnls(centered, y_centered)
        else:  # RIDGE_NONNEG: ridge penalty folded into an augmented system
            lam = float(ridge_lambda)
            augmented = np.vstack([centered, np.sqrt(lam) * np.eye(z.shape[1])])
            target = np.concatenate([y_centered, np.zeros(z.shape[1])])
            coeffs = nnls(augmented, target)
        bias = float(y.mean() - z.mean(axis=0) @ coeffs)

    return GrangerModel(
        gamma=float(coeffs[0]),
        lag_weights=coeffs[1:].reshape(history_len, FEATURE_WIDTH),
        bias=bias,
        history_len=history_len,
        variant=variant,
        ridge_lambda=float(ridge_lambda) if ridge_lambda is not None else None,
        clamp_output=clamp_output,
    )


def fit_exp_impulse(
    samples: Sequence[WorkloadSample],
    decay_grid: Sequence[float] = EXP_IMPULSE_DECAY_GRID,
    clamp_output: bool = True,
) -> ExpImpulseModel:
    """Grid-search the decay rate; impulse weights by least squares per rate.

    Unrolling the decay recursion makes the prediction linear in the impulse
    vector for a fixed decay, so each grid point is one linear solve.
    """
    if not samples:
        raise ValueError("need at least one sample")
    best: tuple[float, float, np.ndarray] | None = None
    for decay in decay_grid:
        rows = np.zeros((len(samples), FEATURE_WIDTH))
        target = np.zeros(len(samples))
        for i, s in enumerate(samples):
            t_eval = s.event_timestep
            acc = np.zeros(FEATURE_WIDTH)
            for q_time, feats in s.timed_queries:
                if q_time <= t_eval:
                    acc += np.exp(-decay * (t_eval - q_time)) * np.asarray(feats)
            rows[i] = acc
            target[i] = s.target - s.initial_workload * np.exp(-decay * t_eval)
        beta, *_ = np.linalg.lstsq(rows, target, rcond=None)
        mse = float(np.mean((rows @ beta - target) ** 2))
        if best is None or mse < best[0]:
            best = (mse, decay, beta)
    assert best is not None
    return ExpImpulseModel(decay=best[1], impulse=best[2], clamp_output=clamp_output)


@dataclass(frozen=True)
class ModelSpec:
    """A model-zoo candidate: what to fit and with which knobs."""

    kind: str  # constant | average | granger | exp_impulse
    variant: GrangerVariant | None = None
    history_len: int | None = None
    ridge_lambda: float | str | None = None  # "auto" triggers nested selection

    @property
    def label(self) -> str:
        if self.kind == "granger":
            return f"granger-{self.variant.value}-h{self.history_len}"
        return self.kind

    def sort_rank(self):
        kinds = ("constant", "average", "granger", "exp_impulse")
        return (
            self.history_len or 0,
            _VARIANT_ORDER.get(self.variant, 0),
            kinds.index(self.kind),
        )


@dataclass(frozen=True)
class CvReport:
    spec: ModelSpec
    fold_mses: tuple[float, ...]
    selected_lambdas: tuple[float, ...] = ()

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_mses))

    @property
    def std(self) -> float:
        if len(self.fold_mses) <= 1:
            return 0.0
        if not np.all(np.isfinite(self.fold_mses)):
            return float("inf")
        return float(np.std(self.fold_mses, ddof=1))

    @property
    def median(self) -> float:
        return float(np.median(self.fold_mses))


def _fit_spec(spec: ModelSpec, samples: list[WorkloadSample], ridge_lambda: float | None):
    if spec.kind == "constant":
        return ConstantModel()
    if spec.kind == "average":
        return AverageModel(mean_target=float(np.mean([s.target for s in samples])))
    if spec.kind == "exp_impulse":
        return fit_exp_impulse(samples)
    if spec.kind == "granger":
        return fit_granger(samples, spec.variant, spec.history_len, ridge_lambda)
    raise ValueError(f"unknown model kind {spec.kind!r}")


def _predict_sample(model, sample: WorkloadSample) -> float:
    # Raw (unclamped) predictions: CV scores regression output directly.
    if isinstance(model, GrangerModel):
        return model.predict(sample.initial_workload, sample.features, clamp=False)
    if isinstance(model, ExpImpulseModel):
        return model.predict(
            sample.initial_workload, sample.timed_queries, sample.event_timestep, clamp=False
        )
    return model.predict_events(sample.initial_workload, (), sample.event_timestep)


def _mse(model, samples: Sequence[WorkloadSample]) -> float:
    errs = [(_predict_sample(model, s) - s.target) ** 2 for s in samples]
    return float(np.mean(errs))


def _fold_assignment(keys: list, folds: int, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    order = rng.permutation(len(keys))
    return {keys[idx]: pos % folds for pos, idx in enumerate(order)}


def cross_validate(
    samples: Sequence[WorkloadSample],
    spec: ModelSpec,
    folds: int = 4,
    grouped_by_participant: bool = True,
    seed: int = 0,
    ridge_grid: Sequence[float] = RIDGE_LAMBDA_GRID,
) -> CvReport:
    """K-fold test MSE with deterministic fold assignment.

    Folds group whole participants by default to avoid leakage across a
    participant's conditions. Ridge variants with ridge_lambda="auto" run a
    nested 5-fold selection on each training split. A training split whose
    unregularized fit is singular scores inf for that fold.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    samples = sorted(samples, key=lambda s: s.sort_key())
    if grouped_by_participant:
        groups = sorted({s.group_key for s in samples})
        if len(groups) < folds:
            raise InsufficientGroups(f"{len(groups)} groups < {folds} folds")
        assignment = _fold_assignment(groups, folds, seed)
        fold_of = [assignment[s.group_key] for s in samples]
    else:
        if len(samples) < folds:
            raise InsufficientGroups(f"{len(samples)} samples < {folds} folds")
        assignment = _fold_assignment(list(range(len(samples))), folds, seed)
        fold_of = [assignment[i] for i in range(len(samples))]

    fold_mses = []
    lambdas = []
    for fold in range(folds):
        train = [s for s, f in zip(samples, fold_of) if f != fold]
        test = [s for s, f in zip(samples, fold_of) if f == fold]
        ridge_lambda = (
            float(spec.ridge_lambda) if isinstance(spec.ridge_lambda, (int, float)) else None
        )
        if spec.kind == "granger" and spec.variant in _RIDGE_VARIANTS:
            if spec.ridge_lambda == "auto":
                ridge_lambda = _select_ridge_lambda(train, spec, seed, ridge_grid)
            lambdas.append(ridge_lambda)
        try:
            model = _fit_spec(spec, train, ridge_lambda)
            fold_mses.append(_mse(model, test))
        except SingularSystem:
            fold_mses.append(float("inf"))
    return CvReport(spec=spec, fold_mses=tuple(fold_mses), selected_lambdas=tuple(lambdas))


def _select_ridge_lambda(train, spec: ModelSpec, seed: int, grid) -> float:
    """Nested 5-fold pick of the ridge strength (ties go to the smallest)."""
    inner_folds = 5
    groups = sorted({s.group_key for s in train})
    grouped = len(groups) >= inner_folds
    best = None
    for lam in grid:
        inner_spec = replace(spec, ridge_lambda=float(lam))
        report = cross_validate(
            train,
            inner_spec,
            folds=inner_folds,
            grouped_by_participant=grouped,
            seed=seed + 1,
        )
        if best is None or report.mean < best[0]:
            best = (report.mean, float(lam))
    return best[1]


def select_model(reports: Sequence[CvReport]) -> ModelSpec:
    """Lowest median test MSE wins; ties break to smaller history, then variant."""
    if not reports:
        raise ValueError("need at least one report")
    ranked = sorted(reports, key=lambda r: (r.median, *r.spec.sort_rank()))
    return ranked[0].spec


def model_zoo_specs(histories: Sequence[int] = (1, 5, 10, 15, 20, 25, 30)) -> list[ModelSpec]:
    """The full selection sweep: baselines, every Granger variant x history, Exp-Impulse."""
    specs = [ModelSpec(kind="constant"), ModelSpec(kind="average")]
    for variant in (
        GrangerVariant.PLAIN,
        GrangerVariant.NONNEG,
        GrangerVariant.RIDGE,
        GrangerVariant.RIDGE_NONNEG,
    ):
        for h in histories:
            ridge = "auto" if variant in _RIDGE_VARIANTS else None
            specs.append(
                ModelSpec(kind="granger", variant=variant, history_len=h, ridge_lambda=ridge)
            )
    specs.append(ModelSpec(kind="exp_impulse"))
    return specs


def make_floor_model(
    impact_scale: float = 1.0, history_len: int = 10, clamp_output: bool = True
) -> GrangerModel:
    """Constructed box-constrained model: flat lag weights at scale * 0.05.

    Useful as a simulation workload model without fitting; a 2x impact_scale
    doubles every lag weight while staying inside the [0.05, 1] box.
    """
    weight = BOX_LOWER * impact_scale
    if not BOX_LOWER <= weight <= BOX_UPPER:
        raise ValueError("impact_scale puts lag weights outside the box")
    return GrangerModel(
        gamma=BOX_LOWER,
        lag_weights=np.full((history_len, FEATURE_WIDTH), weight),
        bias=0.0,
        history_len=history_len,
        variant=GrangerVariant.BOX_SIM,
        clamp_output=clamp_output,
    )


MODEL_SCHEMA = "hilbandit-workload-model"
MODEL_SCHEMA_VERSION = 1


def fingerprint_samples(samples: Sequence[WorkloadSample]) -> str:
    digest = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.sort_key()):
        digest.update(
            f"{s.group_key}|{s.condition_id}|{s.event_timestep}|{s.initial_workload!r}|"
            f"{s.target!r}|".encode()
        )
        digest.update(s.features.tobytes())
    return digest.hexdigest()[:16]


def save_model(path, model, data_fingerprint: str = "") -> None:
    record: dict = {
        "schema": MODEL_SCHEMA,
        "schema_version": MODEL_SCHEMA_VERSION,
        "data_fingerprint": data_fingerprint,
        "clamp_output": model.clamp_output,
    }
    if isinstance(model, GrangerModel):
        record.update(
            kind="granger",
            variant=model.variant.value,
            history_len=model.history_len,
            ridge_lambda=model.ridge_lambda,
            gamma=model.gamma,
            bias=model.bias,
            lag_weights=model.lag_weights.tolist(),
        )
    elif isinstance(model, ExpImpulseModel):
        record.update(kind="exp_impulse", decay=model.decay, impulse=model.impulse.tolist())
    elif isinstance(model, ConstantModel):
        record.update(kind="constant")
    elif isinstance(model, AverageModel):
        record.update(kind="average", mean_target=model.mean_target)
    else:
        raise ValueError(f"cannot serialize {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"{path}: not a {MODEL_SCHEMA} file")
    if record.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {record.get('schema_version')!r}")
    kind = record["kind"]
    clamp = bool(record.get("clamp_output", True))
    if kind == "granger":
        return GrangerModel(
            gamma=record["gamma"],
            lag_weights=np.array(record["lag_weights"]),
            bias=record["bias"],
            history_len=record["history_len"],
            variant=GrangerVariant(record["variant"]),
            ridge_lambda=record["ridge_lambda"],
            clamp_output=clamp,
        )
    if kind == "exp_impulse":
        return ExpImpulseModel(
            decay=record["decay"], impulse=np.array(record["impulse"]), clamp_output=clamp
        )
    if kind == "constant":
        return ConstantModel(clamp_output=clamp)
    if kind == "average":
        return AverageModel(mean_target=record["mean_target"], clamp_output=clamp)
    raise ValueError(f"{path}: unknown model kind {kind!r}")
