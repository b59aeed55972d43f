"""Querying-workload study schemas, scoring, synthetic generation, featurization.

The synthetic generator mirrors the online-study protocol: every participant
runs the full 2 (query difficulty) x 3 (distraction) x 2 (query spacing)
factorial of conditions, answering periodic robot queries while a hidden
lag-weighted workload process produces the self-reported scores.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DT_SECONDS = 10
DEFAULT_HORIZON = 33  # 5.5 minutes of 10 s timesteps
FIRST_QUERY_TIMESTEP = 6  # queries start one minute into a condition
QUERY_SPACINGS = (6, 12)  # 1 or 2 minutes between queries
FEATURE_WIDTH = 8  # one-hot triple: difficulty(2) + response(3) + distraction(3)


class Difficulty(str, enum.Enum):
    EASY = "easy"
    HARD = "hard"


class ResponseType(str, enum.Enum):
    MCQ = "MCQ"
    BB = "BB"
    OE = "OE"


class Distraction(str, enum.Enum):
    NONE = "none"
    EASY_ADD = "easy_add"
    HARD_VIDEO = "hard_video"


_DIFFICULTIES = tuple(Difficulty)
_RESPONSES = tuple(ResponseType)
_DISTRACTIONS = tuple(Distraction)


def encode_query(
    difficulty: Difficulty, response: ResponseType, distraction: Distraction
) -> np.ndarray:
    """Canonical 8-wide one-hot triple [easy, hard | MCQ, BB, OE | none, easy_add, hard_video]."""
    vec = np.zeros(FEATURE_WIDTH)
    vec[_DIFFICULTIES.index(difficulty)] = 1.0
    vec[2 + _RESPONSES.index(response)] = 1.0
    vec[5 + _DISTRACTIONS.index(distraction)] = 1.0
    return vec


class ParseError(Exception):
    """A dataset file record failed validation."""


class SchemaVersionMismatch(ParseError):
    """The file declares a schema version this code does not read."""


def _likert(value, name: str) -> int:
    value = int(value)
    if not 1 <= value <= 5:
        raise ValueError(f"{name} must be a Likert value in [1, 5], got {value}")
    return value


@dataclass(frozen=True)
class TlxResponse:
    """Five modified NASA-TLX subscales on 5-point Likert scales."""

    mental: int
    temporal: int
    performance: int
    effort: int
    frustration: int

    def __post_init__(self):
        for name in ("mental", "temporal", "performance", "effort", "frustration"):
            object.__setattr__(self, name, _likert(getattr(self, name), name))


def tlx_to_workload(t: TlxResponse) -> float:
    """Weighted normalized score 0.4*mental + 0.2*temporal + 0.4*effort.

    Each subscale is normalized as (v - 1) / 4 so the score lies in [0, 1];
    performance and frustration do not enter.
    """

    def norm(v: int) -> float:
        return (v - 1) / 4.0

    return 0.4 * norm(t.mental) + 0.2 * norm(t.temporal) + 0.4 * norm(t.effort)


def workload_to_tlx(score: float) -> TlxResponse:
    """Deterministic Likert decomposition realizing the nearest 0.05-grid score."""
    k = int(round(min(max(score, 0.0), 1.0) * 20))
    best = None
    for mental in range(5):
        for effort in range(5):
            temporal = k - 2 * (mental + effort)
            if 0 <= temporal <= 4:
                key = (abs(mental - effort), temporal, mental)
                if best is None or key < best[0]:
                    best = (key, (mental, temporal, effort))
    assert best is not None
    mental, temporal, effort = best[1]
    performance = 5 - int(round(4 * k / 20))
    frustration = 1 + int(round(4 * k / 20))
    return TlxResponse(mental + 1, temporal + 1, performance, effort + 1, frustration)


@dataclass(frozen=True)
class QueryEvent:
    timestep: int
    difficulty: Difficulty
    response_type: ResponseType
    distraction: Distraction
    tlx: TlxResponse

    def features(self) -> np.ndarray:
        return encode_query(self.difficulty, self.response_type, self.distraction)


@dataclass(frozen=True)
class StudyCondition:
    participant_id: str
    difficulty: Difficulty
    distraction: Distraction
    query_spacing: int
    horizon: int
    initial_workload: float
    events: tuple[QueryEvent, ...]
    condition_index: int = 0

    def __post_init__(self):
        if self.query_spacing not in QUERY_SPACINGS:
            raise ValueError(f"query_spacing must be one of {QUERY_SPACINGS}")
        if not 0.0 <= self.initial_workload <= 1.0:
            raise ValueError("initial_workload must lie in [0, 1]")
        steps = [e.timestep for e in self.events]
        if any(not 0 <= t < self.horizon for t in steps):
            raise ValueError("event timestep outside the condition horizon")
        for prev, cur in zip(steps, steps[1:]):
            if cur - prev != self.query_spacing:
                raise ValueError("consecutive events must be query_spacing apart")


@dataclass(frozen=True)
class WorkloadSample:
    """One (query history, initial workload, observed workload) training pair.

    ``features`` holds the lagged one-hot block (8 * history_len wide);
    ``timed_queries`` keeps the absolute-time prefix history so that
    continuous-time models can be fit from the same pairs.
    """

    initial_workload: float
    features: np.ndarray
    target: float
    group_key: str
    condition_id: str = ""
    event_timestep: int = 0
    timed_queries: tuple[tuple[int, tuple[float, ...]], ...] = ()

    def sort_key(self):
        return (self.group_key, self.condition_id, self.event_timestep)


@dataclass(frozen=True)
class PopulationProfile:
    """Synthetic population: how strongly queries move self-reported workload."""

    name: str
    participant_count: int
    impact_scale: float
    noise_scale: float = 0.05


def population_profile(name: str, participants: int | None = None, noise_scale: float = 0.05):
    """Standard profiles: d1 (no limitations), d2 (limitations), d12 (both).

    d2 carries a larger query-impact scale than d1, encoding the higher
    workload observed for users with mobility limitations; d12 models the
    pooled population with the participant-weighted average impact.
    """
    name = name.lower()
    if name == "d1":
        return PopulationProfile("d1", participants or 89, 1.0, noise_scale)
    if name == "d2":
        return PopulationProfile("d2", participants or 17, 2.0, noise_scale)
    if name == "d12":
        scale = (89 * 1.0 + 17 * 2.0) / 106
        return PopulationProfile("d12", participants or 106, scale, noise_scale)
    raise ValueError(f"unknown profile {name!r}; expected d1, d2, or d12")


# Hidden ground-truth process: lag-decayed impulse weights over the one-hot
# encoding, scaled per population. Kept simple so constrained fits can
# realize it.
GT_HISTORY = 10
GT_GAMMA = 0.6
GT_BIAS = 0.0
GT_LAG_DECAY = 0.5
GT_BASE_IMPULSE = np.array([0.02, 0.05, 0.02, 0.04, 0.06, 0.01, 0.03, 0.05])


def ground_truth_workload(
    profile: PopulationProfile,
    initial_workload: float,
    history: Sequence[tuple[int, np.ndarray]],
    t: int,
) -> float:
    """Pre-noise workload the hidden process assigns at timestep ``t``."""
    total = GT_GAMMA * initial_workload + GT_BIAS
    for timestep, feats in history:
        lag = t - timestep
        if 0 <= lag < GT_HISTORY:
            total += profile.impact_scale * (GT_LAG_DECAY**lag) * float(
                GT_BASE_IMPULSE @ np.asarray(feats)
            )
    return total


def quantize_workload(value: float) -> float:
    """Clamp to [0, 1] and snap to the 0.05 grid the Likert instrument resolves."""
    return round(min(max(value, 0.0), 1.0) * 20) / 20.0


def generate_synthetic_study(
    profile: PopulationProfile, seed: int, horizon: int = DEFAULT_HORIZON
) -> list[StudyCondition]:
    """Full factorial of 12 conditions per participant with process-driven TLX."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    conditions: list[StudyCondition] = []
    for p in range(profile.participant_count):
        participant = f"{profile.name}-p{p:03d}"
        idx = 0
        for difficulty in _DIFFICULTIES:
            for distraction in _DISTRACTIONS:
                for spacing in QUERY_SPACINGS:
                    wl0 = rng.integers(4, 17) / 20.0  # 0.05 grid in [0.2, 0.8]
                    timesteps = list(range(FIRST_QUERY_TIMESTEP, horizon, spacing))
                    events = []
                    history: list[tuple[int, np.ndarray]] = []
                    for j, t in enumerate(timesteps):
                        response = _RESPONSES[j % 3]
                        feats = encode_query(difficulty, response, distraction)
                        history.append((t, feats))
                        raw = ground_truth_workload(profile, wl0, history, t)
                        if profile.noise_scale > 0:
                            raw += profile.noise_scale * rng.standard_normal()
                        tlx = workload_to_tlx(quantize_workload(raw))
                        events.append(QueryEvent(t, difficulty, response, distraction, tlx))
                    conditions.append(
                        StudyCondition(
                            participant_id=participant,
                            difficulty=difficulty,
                            distraction=distraction,
                            query_spacing=spacing,
                            horizon=horizon,
                            initial_workload=wl0,
                            events=tuple(events),
                            condition_index=idx,
                        )
                    )
                    idx += 1
    return conditions


def featurize_history(
    events: Sequence[tuple[int, np.ndarray]], t: int, history_len: int
) -> np.ndarray:
    """Lagged feature block: lag i holds the query at timestep t - i, else zeros."""
    block = np.zeros(FEATURE_WIDTH * history_len)
    for timestep, feats in events:
        lag = t - timestep
        if 0 <= lag < history_len:
            start = FEATURE_WIDTH * lag
            block[start : start + FEATURE_WIDTH] = np.asarray(feats)
    return block


def build_training_pairs(
    conditions: Iterable[StudyCondition], history_len: int
) -> list[WorkloadSample]:
    """One sample per query event, zero-padding lags without a query."""
    if history_len < 1:
        raise ValueError("history_len must be >= 1")
    samples: list[WorkloadSample] = []
    for cond in conditions:
        cond_id = f"{cond.participant_id}/c{cond.condition_index:02d}"
        timed: list[tuple[int, tuple[float, ...]]] = []
        for event in cond.events:
            timed.append((event.timestep, tuple(event.features())))
            block = featurize_history(
                [(t, np.array(f)) for t, f in timed], event.timestep, history_len
            )
            samples.append(
                WorkloadSample(
                    initial_workload=cond.initial_workload,
                    features=block,
                    target=tlx_to_workload(event.tlx),
                    group_key=cond.participant_id,
                    condition_id=cond_id,
                    event_timestep=event.timestep,
                    timed_queries=tuple(timed),
                )
            )
    return samples


STUDY_SCHEMA = "hilbandit-study"
STUDY_SCHEMA_VERSION = 1


def save_study(path, conditions: Sequence[StudyCondition], profile_name: str = "") -> None:
    """Line-delimited records: one header line, then one line per query event."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "schema": STUDY_SCHEMA,
            "schema_version": STUDY_SCHEMA_VERSION,
            "dt_seconds": DT_SECONDS,
            "profile": profile_name,
        }
        fh.write(json.dumps(header) + "\n")
        for cond in conditions:
            for event in cond.events:
                record = {
                    "participant": cond.participant_id,
                    "condition_index": cond.condition_index,
                    "condition_difficulty": cond.difficulty.value,
                    "condition_distraction": cond.distraction.value,
                    "query_spacing": cond.query_spacing,
                    "horizon": cond.horizon,
                    "initial_workload": cond.initial_workload,
                    "timestep": event.timestep,
                    "difficulty": event.difficulty.value,
                    "response_type": event.response_type.value,
                    "distraction": event.distraction.value,
                    "tlx": {
                        "mental": event.tlx.mental,
                        "temporal": event.tlx.temporal,
                        "performance": event.tlx.performance,
                        "effort": event.tlx.effort,
                        "frustration": event.tlx.frustration,
                    },
                }
                fh.write(json.dumps(record) + "\n")


def load_study(path) -> list[StudyCondition]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: line 1: invalid header: {err}") from err
    if header.get("schema") != STUDY_SCHEMA:
        raise ParseError(f"{path}: line 1: not a {STUDY_SCHEMA} file")
    if header.get("schema_version") != STUDY_SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: schema_version {header.get('schema_version')!r}, "
            f"expected {STUDY_SCHEMA_VERSION}"
        )

    grouped: dict[tuple[str, int], dict] = {}
    order: list[tuple[str, int]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise ParseError(f"{path}: line {lineno}: invalid record: {err}") from err
        try:
            tlx = TlxResponse(**rec["tlx"])
            event = QueryEvent(
                timestep=int(rec["timestep"]),
                difficulty=Difficulty(rec["difficulty"]),
                response_type=ResponseType(rec["response_type"]),
                distraction=Distraction(rec["distraction"]),
                tlx=tlx,
            )
        except (KeyError, ValueError, TypeError) as err:
            raise ParseError(f"{path}: line {lineno}: {err}") from err
        key = (rec["participant"], int(rec["condition_index"]))
        if key not in grouped:
            grouped[key] = {
                "difficulty": rec["condition_difficulty"],
                "distraction": rec["condition_distraction"],
                "spacing": int(rec["query_spacing"]),
                "horizon": int(rec["horizon"]),
                "wl0": float(rec["initial_workload"]),
                "events": [],
            }
            order.append(key)
        grouped[key]["events"].append((lineno, event))

    conditions = []
    for participant, cond_idx in order:
        info = grouped[(participant, cond_idx)]
        events = tuple(e for _, e in sorted(info["events"], key=lambda t: t[1].timestep))
        first_line = info["events"][0][0]
        try:
            conditions.append(
                StudyCondition(
                    participant_id=participant,
                    difficulty=Difficulty(info["difficulty"]),
                    distraction=Distraction(info["distraction"]),
                    query_spacing=info["spacing"],
                    horizon=info["horizon"],
                    initial_workload=info["wl0"],
                    events=events,
                    condition_index=cond_idx,
                )
            )
        except ValueError as err:
            raise ParseError(f"{path}: record starting line {first_line}: {err}") from err
    return conditions
