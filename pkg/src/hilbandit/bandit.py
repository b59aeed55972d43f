"""Linear contextual-bandit estimation and action-selection policies.

Six robot actions (pitch TA/VS/TV x roll 0/90) carry independent ridge
estimators with UCB exploration bonuses; a seventh distinguished action
defers to the human expert. Policies decide between acting and deferring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import cholesky_solve
from .study import Difficulty, Distraction, ResponseType, encode_query

N_ROBOT_ACTIONS = 6
QUERY_ACTION = 6
ACTION_LABELS = ("TA-0", "TA-90", "VS-0", "VS-90", "TV-0", "TV-90")
ROBOT_ACTIONS = tuple(range(N_ROBOT_ACTIONS))

DEFAULT_COUNTERFACTUAL_QUERY = (Difficulty.EASY, ResponseType.MCQ, Distraction.NONE)


class DimensionMismatch(Exception):
    """Context vector length disagrees with the model's context dimension."""


@dataclass
class UcbScores:
    means: np.ndarray  # (6,)
    bonuses: np.ndarray  # (6,)
    values: np.ndarray  # (6,) means + alpha * bonuses


@dataclass
class Decision:
    """A policy's choice plus the diagnostics behind it."""

    action: int
    gap: float | None = None
    threshold: float | None = None
    predicted_workload: float | None = None
    query_probability: float | None = None

    @property
    def is_query(self) -> bool:
        return self.action == QUERY_ACTION


class BanditModel:
    """Per-action Gram/response accumulators with shared alpha and lambda."""

    def __init__(self, context_dim: int, alpha: float = 0.5, reg_lambda: float = 1.0):
        if alpha <= 0 or reg_lambda <= 0:
            raise ValueError("alpha and reg_lambda must be positive")
        self.context_dim = context_dim
        self.alpha = alpha
        self.reg_lambda = reg_lambda
        self.grams = [reg_lambda * np.eye(context_dim) for _ in range(N_ROBOT_ACTIONS)]
        self.responses = [np.zeros(context_dim) for _ in range(N_ROBOT_ACTIONS)]
        self.thetas = np.zeros((N_ROBOT_ACTIONS, context_dim))

    def copy(self) -> "BanditModel":
        dup = BanditModel(self.context_dim, self.alpha, self.reg_lambda)
        dup.grams = [g.copy() for g in self.grams]
        dup.responses = [b.copy() for b in self.responses]
        dup.thetas = self.thetas.copy()
        return dup

    def _check_context(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.context_dim,):
            raise DimensionMismatch(f"context shape {x.shape}, expected ({self.context_dim},)")
        return x

    def update(self, x, action: int, reward: float) -> None:
        """Rank-one update of one robot action's estimator."""
        if action not in ROBOT_ACTIONS:
            raise ValueError(f"update requires a robot action, got {action}")
        x = self._check_context(x)
        self.grams[action] += np.outer(x, x)
        self.responses[action] += reward * x
        self.thetas[action] = cholesky_solve(self.grams[action], self.responses[action])

    def pretrain(self, samples: Sequence[tuple[np.ndarray, int, float]]) -> "BanditModel":
        """Fold a batch of (context, action, reward) into the accumulators."""
        for x, action, reward in samples:
            if action not in ROBOT_ACTIONS:
                raise ValueError(f"pretraining requires robot actions, got {action}")
            x = self._check_context(x)
            self.grams[action] += np.outer(x, x)
            self.responses[action] += reward * x
        for a in ROBOT_ACTIONS:
            self.thetas[a] = cholesky_solve(self.grams[a], self.responses[a])
        return self

    def ucb(self, x) -> UcbScores:
        """Mean, bonus, and UCB value per robot action (no explicit inverses)."""
        x = self._check_context(x)
        means = self.thetas @ x
        bonuses = np.empty(N_ROBOT_ACTIONS)
        for a in ROBOT_ACTIONS:
            bonuses[a] = np.sqrt(x @ cholesky_solve(self.grams[a], x))
        return UcbScores(means=means, bonuses=bonuses, values=means + self.alpha * bonuses)

    def save(self, path) -> None:
        record = {
            "schema": "hilbandit-bandit-checkpoint",
            "schema_version": 1,
            "context_dim": self.context_dim,
            "alpha": self.alpha,
            "reg_lambda": self.reg_lambda,
            "grams": [g.tolist() for g in self.grams],
            "responses": [b.tolist() for b in self.responses],
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    @classmethod
    def load(cls, path) -> "BanditModel":
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        if record.get("schema") != "hilbandit-bandit-checkpoint":
            raise ValueError(f"{path}: not a bandit checkpoint")
        model = cls(record["context_dim"], record["alpha"], record["reg_lambda"])
        model.grams = [np.array(g) for g in record["grams"]]
        model.responses = [np.array(b) for b in record["responses"]]
        for a in ROBOT_ACTIONS:
            model.thetas[a] = cholesky_solve(model.grams[a], model.responses[a])
        return model


@dataclass(frozen=True)
class PolicyConfig:
    """Which selector to run and its knobs.

    kind: one of linucb, always_query, exp_decay, query_gap.
    decay_rate: exp_decay's c in P(query) = exp(-c * foods_seen).
    gap_scale: query_gap's w multiplying the predicted workload.
    counterfactual_query: query type assumed when predicting the workload of
        deferring right now.
    """

    kind: str
    decay_rate: float = 0.5
    gap_scale: float = 4.0
    counterfactual_query: tuple[Difficulty, ResponseType, Distraction] = (
        DEFAULT_COUNTERFACTUAL_QUERY
    )

    def __post_init__(self):
        if self.kind not in ("linucb", "always_query", "exp_decay", "query_gap"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.decay_rate < 0 or self.gap_scale < 0:
            raise ValueError("decay_rate and gap_scale must be nonnegative")


def select_linucb(model: BanditModel, x) -> Decision:
    """argmax of the UCB values over robot actions; never defers."""
    scores = model.ucb(x)
    return Decision(action=int(np.argmax(scores.values)))


def select_always_query() -> Decision:
    return Decision(action=QUERY_ACTION)


def select_exp_decay(
    model: BanditModel,
    x,
    foods_seen: int,
    is_first_step_of_food: bool,
    decay_rate: float,
    rng: np.random.Generator,
) -> Decision:
    """Defer with probability exp(-c * foods_seen) on a food's first step."""
    p_query = float(np.exp(-decay_rate * foods_seen)) if is_first_step_of_food else 0.0
    if p_query > 0.0 and rng.random() < p_query:
        return Decision(action=QUERY_ACTION, query_probability=p_query)
    fallback = select_linucb(model, x)
    fallback.query_probability = p_query
    return fallback


def select_query_gap(
    model: BanditModel,
    x,
    initial_workload: float,
    query_history: Sequence[tuple[int, np.ndarray]],
    t: int,
    gap_scale: float,
    workload_model,
    counterfactual_query=DEFAULT_COUNTERFACTUAL_QUERY,
) -> Decision:
    """Defer when the worst-case gap between the two best actions exceeds
    the scaled counterfactual workload of querying right now.

    The two best actions are ranked by mean estimate; the gap is the
    optimistic value of the runner-up minus the pessimistic value of the
    leader. The counterfactual appends one query of the configured type at
    the current timestep before evaluating the workload model.
    """
    scores = model.ucb(x)
    best = int(np.argmax(scores.means))
    rest_means = scores.means.copy()
    rest_means[best] = -np.inf
    second = int(np.argmax(rest_means))
    gap = (scores.means[second] + model.alpha * scores.bonuses[second]) - (
        scores.means[best] - model.alpha * scores.bonuses[best]
    )
    counterfactual = list(query_history) + [(t, encode_query(*counterfactual_query))]
    predicted = float(workload_model.predict_events(initial_workload, counterfactual, t))
    threshold = gap_scale * predicted
    if gap > threshold:
        return Decision(
            action=QUERY_ACTION, gap=gap, threshold=threshold, predicted_workload=predicted
        )
    return Decision(
        action=int(np.argmax(scores.values)),
        gap=gap,
        threshold=threshold,
        predicted_workload=predicted,
    )
