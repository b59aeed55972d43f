"""Simulated bite-acquisition environment.

A synthetic food dataset stands in for image-derived contexts: each food
type has a mean context and every trial draws a noisy copy, with per-action
success probabilities that are linear in the context (so the bandit's
linear-reward assumption holds by construction). Episodes walk a sequence
of food items, sampling Bernoulli task rewards, deferring to an expert when
the policy asks, and evolving the workload history as queries happen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
import numpy as np

from .bandit import (
    N_ROBOT_ACTIONS,
    QUERY_ACTION,
    BanditModel,
    Decision,
    PolicyConfig,
    select_always_query,
    select_exp_decay,
    select_linucb,
    select_query_gap,
)
from .study import encode_query

PROB_CLIP = 0.02  # keeps success probabilities away from 0 and 1
SPLITS = ("pretrain", "validation", "test")


class UnknownContext(Exception):
    """The context does not belong to any trial in the dataset."""


class EpisodeFinished(Exception):
    """step() was called after the last food item resolved."""


@dataclass(frozen=True)
class FoodTrial:
    context: np.ndarray  # (d,)
    success: np.ndarray  # (6,) success probability per robot action


@dataclass(frozen=True)
class FoodType:
    type_id: int
    name: str
    split: str
    trials: tuple[FoodTrial, ...]


@dataclass
class FoodDataset:
    context_dim: int
    foods: tuple[FoodType, ...]
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for food in self.foods:
            for trial_idx, trial in enumerate(food.trials):
                self._lookup[trial.context.tobytes()] = (food.type_id, trial_idx)

    def type_ids(self, split: str | None = None) -> list[int]:
        return [f.type_id for f in self.foods if split is None or f.split == split]

    def food(self, type_id: int) -> FoodType:
        return self.foods[type_id]

    def find_trial(self, x: np.ndarray) -> FoodTrial:
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._lookup:
            raise UnknownContext("context is not a trial of this dataset")
        type_id, trial_idx = self._lookup[key]
        return self.foods[type_id].trials[trial_idx]


def expert_action(dataset: FoodDataset, x) -> int:
    """Optimal robot action for a known trial context (ties to lowest index)."""
    return int(np.argmax(dataset.find_trial(x).success))


def generate_food_dataset(
    seed: int,
    context_dim: int = 32,
    n_types: int = 16,
    n_trials: int = 30,
    context_noise: float = 0.05,
    best_action_margin: float = 0.08,
) -> FoodDataset:
    """Draw a linearly-realizable dataset with one dominant action per type.

    Contexts carry a constant anchor coordinate so each action's base rate
    is expressible linearly; type means are tilted toward a preferred
    action's weight vector until that action clears the margin on average.
    """
    if n_types < 4:
        raise ValueError("need at least 4 food types to populate all splits")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    latent = context_dim - 1
    base = rng.uniform(0.30, 0.45, size=N_ROBOT_ACTIONS)
    directions = rng.normal(size=(N_ROBOT_ACTIONS, latent))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    foods = []
    n_test = 2 if n_types >= 8 else 1
    n_val = 2 if n_types >= 8 else 1
    for type_id in range(n_types):
        preferred = type_id % N_ROBOT_ACTIONS
        for _ in range(200):
            tilt = directions[preferred] + 0.3 * rng.normal(size=latent)
            mean_latent = 0.40 * tilt / np.linalg.norm(tilt)
            mean_success = np.clip(
                base + directions @ mean_latent, PROB_CLIP, 1 - PROB_CLIP
            )
            order = np.sort(mean_success)
            if (
                int(np.argmax(mean_success)) == preferred
                and order[-1] - order[-2] >= best_action_margin
            ):
                break
        else:
            raise RuntimeError("could not place a unique best action; adjust margins")
        trials = []
        for _ in range(n_trials):
            x_latent = mean_latent + context_noise * rng.normal(size=latent)
            context = np.concatenate([[1.0], x_latent])
            success = np.clip(base + directions @ x_latent, PROB_CLIP, 1 - PROB_CLIP)
            trials.append(FoodTrial(context=context, success=success))
        if type_id >= n_types - n_test:
            split = "test"
        elif type_id >= n_types - n_test - n_val:
            split = "validation"
        else:
            split = "pretrain"
        foods.append(
            FoodType(type_id=type_id, name=f"food-{type_id:02d}", split=split, trials=tuple(trials))
        )
    return FoodDataset(context_dim=context_dim, foods=tuple(foods))


def pretraining_samples(
    dataset: FoodDataset, seed: int, split: str = "pretrain"
) -> list[tuple[np.ndarray, int, float]]:
    """One Bernoulli-labelled sample per (trial, action) in the split."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples = []
    for type_id in dataset.type_ids(split):
        for trial in dataset.food(type_id).trials:
            for action in range(N_ROBOT_ACTIONS):
                reward = float(rng.random() < trial.success[action])
                samples.append((trial.context, action, reward))
    return samples


@dataclass(frozen=True)
class EpisodeConfig:
    food_sequence: tuple[int, ...]
    policy: PolicyConfig
    decision_model: object  # workload model driving query_gap decisions
    evaluation_model: object | None = None  # metrics model; defaults to decision
    max_attempts: int = 10
    initial_workload: float = 0.5
    update_on_query: bool = True

    def __post_init__(self):
        if not self.food_sequence:
            raise ValueError("food_sequence must not be empty")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not 0.0 <= self.initial_workload <= 1.0:
            raise ValueError("initial_workload must lie in [0, 1]")

    @property
    def metrics_model(self):
        return self.evaluation_model if self.evaluation_model is not None else self.decision_model


@dataclass
class TraceStep:
    timestep: int
    food_index: int
    food_type: int
    attempt: int
    context: np.ndarray
    action: int  # executed robot action
    deferred: bool  # this step was driven by the expert
    queried: bool  # first deferral of this food
    reward: int
    expected_reward: float
    gap: float | None = None
    threshold: float | None = None


@dataclass
class FoodOutcome:
    type_id: int
    attempts: int
    converged: bool
    queried: bool

    @property
    def failed(self) -> bool:
        return not self.converged


@dataclass
class EpisodeTrace:
    initial_workload: float
    steps: list[TraceStep] = field(default_factory=list)
    foods: list[FoodOutcome] = field(default_factory=list)
    final_workload: float = 0.0
    query_history: list[tuple[int, tuple[float, ...]]] = field(default_factory=list)


class EpisodeEngine:
    """Sequential mechanics of one episode; policies stay outside.

    Each timestep is one acquisition attempt: a fresh trial of the current
    food is drawn, one action executes, and a Bernoulli reward resolves it.
    Deferring commits the food to the expert's answer until it converges or
    the attempt cap is reached. The environment RNG is consumed in a fixed
    pattern (one trial draw + one reward draw per step) so traces replay.
    """

    def __init__(self, dataset: FoodDataset, config: EpisodeConfig, env_rng: np.random.Generator):
        self.dataset = dataset
        self.config = config
        self.env_rng = env_rng
        self.food_index = 0
        self.attempts_used = 0
        self.committed_action: int | None = None
        self.queried_this_food = False
        self.t = 0
        self.trace = EpisodeTrace(initial_workload=config.initial_workload)
        self.query_history: list[tuple[int, tuple[float, ...]]] = []
        self._pending: FoodTrial | None = None
        self.finished = len(config.food_sequence) == 0

    @property
    def current_food(self) -> int:
        return self.config.food_sequence[self.food_index]

    def attempt_context(self) -> tuple[np.ndarray, int, bool]:
        """Draw (once) the trial for the current attempt."""
        if self.finished:
            raise EpisodeFinished("episode is complete")
        if self._pending is None:
            food = self.dataset.food(self.current_food)
            idx = int(self.env_rng.integers(len(food.trials)))
            self._pending = food.trials[idx]
        return self._pending.context, self.current_food, self.attempts_used == 0

    def step(
        self,
        action: int | None,
        bandit: BanditModel | None = None,
        decision: Decision | None = None,
        expert_override: int | None = None,
    ) -> TraceStep:
        """Execute one attempt.

        ``action`` is the policy's choice (QUERY_ACTION defers); None means
        "continue the committed expert action". The bandit, when given, is
        updated with the executed action's reward (query steps update the
        executed expert action's estimator only when configured to).
        """
        if self.finished:
            raise EpisodeFinished("episode is complete")
        trial_context, food_type, _ = self.attempt_context()
        trial = self._pending

        queried_now = False
        if action is None:
            if self.committed_action is None:
                raise ValueError("no committed expert action to continue")
            executed = self.committed_action
            deferred = True
        elif action == QUERY_ACTION:
            executed = (
                expert_override
                if expert_override is not None
                else expert_action(self.dataset, trial_context)
            )
            deferred = True
            if not self.queried_this_food:
                queried_now = True
                self.queried_this_food = True
                query = encode_query(*self.config.policy.counterfactual_query)
                self.query_history.append((self.t, tuple(query)))
            self.committed_action = executed
        else:
            if not 0 <= action < N_ROBOT_ACTIONS:
                raise ValueError(f"invalid action {action}")
            executed = action
            deferred = False

        expected = float(trial.success[executed])
        reward = int(self.env_rng.random() < expected)
        if bandit is not None and (not deferred or self.config.update_on_query):
            bandit.update(trial_context, executed, float(reward))

        step = TraceStep(
            timestep=self.t,
            food_index=self.food_index,
            food_type=food_type,
            attempt=self.attempts_used,
            context=trial_context,
            action=executed,
            deferred=deferred,
            queried=queried_now,
            reward=reward,
            expected_reward=expected,
            gap=decision.gap if decision else None,
            threshold=decision.threshold if decision else None,
        )
        self.trace.steps.append(step)
        self.t += 1
        self.attempts_used += 1
        self._pending = None

        if reward == 1 or self.attempts_used >= self.config.max_attempts:
            self.trace.foods.append(
                FoodOutcome(
                    type_id=food_type,
                    attempts=self.attempts_used,
                    converged=reward == 1,
                    queried=self.queried_this_food,
                )
            )
            self.food_index += 1
            self.attempts_used = 0
            self.committed_action = None
            self.queried_this_food = False
            if self.food_index >= len(self.config.food_sequence):
                self.finished = True
        return step

    def finalize(self) -> EpisodeTrace:
        """Evaluate the terminal workload with the metrics model and close."""
        if not self.finished:
            raise ValueError("episode still has foods to resolve")
        t_final = max(self.t - 1, 0)
        wl = self.config.metrics_model.predict_events(
            self.config.initial_workload, self.query_history, t_final
        )
        self.trace.final_workload = min(max(float(wl), 0.0), 1.0)
        self.trace.query_history = list(self.query_history)
        return self.trace


def policy_decision(
    policy: PolicyConfig,
    bandit: BanditModel,
    engine: EpisodeEngine,
    x: np.ndarray,
    first_step: bool,
    config: EpisodeConfig,
    policy_rng: np.random.Generator,
) -> Decision:
    if policy.kind == "linucb":
        return select_linucb(bandit, x)
    if policy.kind == "always_query":
        return select_always_query()
    if policy.kind == "exp_decay":
        return select_exp_decay(
            bandit, x, engine.food_index, first_step, policy.decay_rate, policy_rng
        )
    return select_query_gap(
        bandit,
        x,
        config.initial_workload,
        engine.query_history,
        engine.t,
        policy.gap_scale,
        config.decision_model,
        policy.counterfactual_query,
    )


def run_episode(
    dataset: FoodDataset,
    pretrained: BanditModel,
    config: EpisodeConfig,
    env_seed: int,
    policy_seed: int = 0,
) -> EpisodeTrace:
    """Roll out one full episode; fully deterministic given the two seeds."""
    bandit = pretrained.copy()
    env_rng = np.random.default_rng(np.random.SeedSequence(env_seed))
    policy_rng = np.random.default_rng(np.random.SeedSequence(policy_seed))
    engine = EpisodeEngine(dataset, config, env_rng)
    while not engine.finished:
        x, _, first = engine.attempt_context()
        if engine.committed_action is not None:
            engine.step(None, bandit=bandit)
            continue
        decision = policy_decision(config.policy, bandit, engine, x, first, config, policy_rng)
        engine.step(decision.action, bandit=bandit, decision=decision)
    return engine.finalize()


def replay_rewards(
    dataset: FoodDataset, config: EpisodeConfig, env_seed: int, trace: EpisodeTrace
) -> list[int]:
    """Re-run the recorded action sequence against a fresh env stream.

    Returns the rewards the environment reproduces; a faithful trace yields
    exactly the recorded rewards (and contexts) step for step.
    """
    env_rng = np.random.default_rng(np.random.SeedSequence(env_seed))
    engine = EpisodeEngine(dataset, config, env_rng)
    rewards = []
    for recorded in trace.steps:
        x, _, _ = engine.attempt_context()
        if not np.array_equal(x, recorded.context):
            raise ValueError(f"context mismatch at timestep {recorded.timestep}")
        if recorded.deferred and not recorded.queried and engine.committed_action is not None:
            step = engine.step(None)
        elif recorded.deferred:
            step = engine.step(QUERY_ACTION, expert_override=recorded.action)
        else:
            step = engine.step(recorded.action)
        rewards.append(step.reward)
    return rewards


TRACE_SCHEMA = "hilbandit-trace"
TRACE_SCHEMA_VERSION = 1


def save_trace(path, trace: EpisodeTrace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "schema": TRACE_SCHEMA,
            "schema_version": TRACE_SCHEMA_VERSION,
            "initial_workload": trace.initial_workload,
            "final_workload": trace.final_workload,
            "foods": [
                {
                    "type_id": f.type_id,
                    "attempts": f.attempts,
                    "converged": f.converged,
                    "queried": f.queried,
                }
                for f in trace.foods
            ],
            "query_history": [[t, list(q)] for t, q in trace.query_history],
        }
        fh.write(json.dumps(header) + "\n")
        for s in trace.steps:
            fh.write(
                json.dumps(
                    {
                        "timestep": s.timestep,
                        "food_index": s.food_index,
                        "food_type": s.food_type,
                        "attempt": s.attempt,
                        "context": s.context.tolist(),
                        "action": s.action,
                        "deferred": s.deferred,
                        "queried": s.queried,
                        "reward": s.reward,
                        "expected_reward": s.expected_reward,
                        "gap": s.gap,
                        "threshold": s.threshold,
                    }
                )
                + "\n"
            )


def load_trace(path) -> EpisodeTrace:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != TRACE_SCHEMA:
        raise ValueError(f"{path}: not a {TRACE_SCHEMA} file")
    trace = EpisodeTrace(initial_workload=header["initial_workload"])
    trace.final_workload = header["final_workload"]
    trace.foods = [FoodOutcome(f["type_id"], f["attempts"], f["converged"], f["queried"]) for f in header["foods"]]
    trace.query_history = [(int(t), tuple(q)) for t, q in header["query_history"]]
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        trace.steps.append(
            TraceStep(
                timestep=rec["timestep"],
                food_index=rec["food_index"],
                food_type=rec["food_type"],
                attempt=rec["attempt"],
                context=np.array(rec["context"]),
                action=rec["action"],
                deferred=rec["deferred"],
                queried=rec["queried"],
                reward=rec["reward"],
                expected_reward=rec["expected_reward"],
                gap=rec["gap"],
                threshold=rec["threshold"],
            )
        )
    return trace


FOODS_SCHEMA = "hilbandit-foods"
FOODS_SCHEMA_VERSION = 1


def save_food_dataset(path, dataset: FoodDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {
                    "schema": FOODS_SCHEMA,
                    "schema_version": FOODS_SCHEMA_VERSION,
                    "context_dim": dataset.context_dim,
                }
            )
            + "\n"
        )
        for food in dataset.foods:
            for i, trial in enumerate(food.trials):
                fh.write(
                    json.dumps(
                        {
                            "type_id": food.type_id,
                            "name": food.name,
                            "split": food.split,
                            "trial": i,
                            "context": trial.context.tolist(),
                            "success": trial.success.tolist(),
                        }
                    )
                    + "\n"
                )


def load_food_dataset(path) -> FoodDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != FOODS_SCHEMA:
        raise ValueError(f"{path}: not a {FOODS_SCHEMA} file")
    by_type: dict[int, dict] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        info = by_type.setdefault(
            rec["type_id"], {"name": rec["name"], "split": rec["split"], "trials": []}
        )
        info["trials"].append(
            (rec["trial"], FoodTrial(np.array(rec["context"]), np.array(rec["success"])))
        )
    foods = []
    for type_id in sorted(by_type):
        info = by_type[type_id]
        trials = tuple(t for _, t in sorted(info["trials"], key=lambda p: p[0]))
        foods.append(FoodType(type_id, info["name"], info["split"], trials))
    return FoodDataset(context_dim=header["context_dim"], foods=tuple(foods))
