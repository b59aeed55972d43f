"""Live human-in-the-loop session server.

Serves interactive episodes over JSON endpoints plus a resumable
server-sent-event stream, so a person can stand in for the expert oracle:
the bandit acts autonomously until the policy defers, the human answers
with a robot action, and (optionally) fills a mini-TLX survey after every
answered query. Sessions are durable: every mutation is persisted, and a
restarted server rebuilds engine state by replaying the recorded actions
against the session's deterministic environment stream.
"""

from __future__ import annotations

import asyncio
import json
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .bandit import ACTION_LABELS, QUERY_ACTION, BanditModel, Decision, PolicyConfig
from .runner import child_seed
from .simenv import (
    EpisodeConfig,
    EpisodeEngine,
    FoodDataset,
    expert_action,
    generate_food_dataset,
    load_food_dataset,
    policy_decision,
    pretraining_samples,
)
from .study import TlxResponse, tlx_to_workload
from .workload import load_model, make_floor_model

SESSION_SCHEMA_VERSION = 1
PHASES = ("awaiting_policy", "awaiting_human_action", "awaiting_survey", "finished")


class ServiceError(Exception):
    status = 400


class ConfigError(ServiceError):
    status = 422


class UnknownSession(ServiceError):
    status = 404


class WrongPhase(ServiceError):
    status = 409


class InvalidAction(ServiceError):
    status = 422


class SessionStoreFull(ServiceError):
    status = 429


@dataclass
class SessionRuntime:
    session_id: str
    raw_config: dict
    dataset: FoodDataset
    episode_config: EpisodeConfig
    env_seed: int
    policy_seed: int
    bandit: BanditModel
    engine: EpisodeEngine
    policy_rng: np.random.Generator
    surveys_enabled: bool
    blinded: bool
    phase: str = "awaiting_policy"
    pending_decision: Decision | None = None
    events: list[dict] = field(default_factory=list)
    executed: list[dict] = field(default_factory=list)
    surveys: list[dict] = field(default_factory=list)
    regrets: list[dict] = field(default_factory=list)
    tokens: dict[str, int] = field(default_factory=dict)
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)
    changed: asyncio.Event = field(default_factory=asyncio.Event)

    def emit(self, kind: str, data: dict) -> dict:
        event = {"seq": len(self.events), "event": kind, "data": data}
        self.events.append(event)
        self.changed.set()
        self.changed = asyncio.Event()
        return event


def _resolve_workload_model(ref, data_dir: Path):
    if ref is None:
        return make_floor_model(1.0, 10)
    if not isinstance(ref, dict):
        raise ConfigError("workload model reference must be an object")
    if "path" in ref:
        return load_model(data_dir / ref["path"])
    if "floor_scale" in ref:
        return make_floor_model(float(ref["floor_scale"]), int(ref.get("history_len", 10)))
    raise ConfigError("workload model reference needs 'path' or 'floor_scale'")


def _resolve_dataset(ref, data_dir: Path) -> FoodDataset:
    ref = ref or {}
    if "path" in ref:
        return load_food_dataset(data_dir / ref["path"])
    return generate_food_dataset(
        seed=int(ref.get("seed", 0)),
        context_dim=int(ref.get("context_dim", 32)),
        n_types=int(ref.get("n_types", 16)),
        n_trials=int(ref.get("n_trials", 30)),
    )


class SessionService:
    """Owns the session store; one instance per server process."""

    def __init__(self, data_dir: str | Path, capacity: int = 64):
        self.data_dir = Path(data_dir)
        self.sessions_dir = self.data_dir / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.capacity = capacity
        self._live: dict[str, SessionRuntime] = {}

    # -- construction ------------------------------------------------------

    def _build_runtime(self, session_id: str, raw: dict) -> SessionRuntime:
        policy_raw = raw.get("policy", {})
        kind = policy_raw.get("kind", "query_gap")
        try:
            policy = PolicyConfig(
                kind=kind,
                decay_rate=float(policy_raw.get("decay_rate", 0.5)),
                gap_scale=float(policy_raw.get("gap_scale", 4.0)),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

        dataset = _resolve_dataset(raw.get("dataset"), self.data_dir)
        decision_model = _resolve_workload_model(raw.get("workload_model"), self.data_dir)
        eval_ref = raw.get("evaluation_model")
        evaluation_model = (
            _resolve_workload_model(eval_ref, self.data_dir) if eval_ref else decision_model
        )

        seed = int(raw.get("seed", 0))
        foods_raw = raw.get("foods", {"split": "test", "count": 3})
        if isinstance(foods_raw, list):
            sequence = tuple(int(f) for f in foods_raw)
        else:
            split = foods_raw.get("split", "test")
            count = int(foods_raw.get("count", 3))
            ids = dataset.type_ids(split)
            if not ids:
                raise ConfigError(f"foods.split: no food types in split {split!r}")
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
            sequence = tuple(int(t) for t in rng.choice(ids, size=count, replace=True))
        bad = [f for f in sequence if not 0 <= f < len(dataset.foods)]
        if bad:
            raise ConfigError(f"foods: unknown type ids {bad}")

        try:
            episode_config = EpisodeConfig(
                food_sequence=sequence,
                policy=policy,
                decision_model=decision_model,
                evaluation_model=evaluation_model,
                max_attempts=int(raw.get("max_attempts", 10)),
                initial_workload=float(raw.get("initial_workload", 0.5)),
                update_on_query=bool(raw.get("update_on_query", True)),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

        bandit_raw = raw.get("bandit", {})
        if "path" in bandit_raw:
            bandit = BanditModel.load(self.data_dir / bandit_raw["path"])
            if bandit.context_dim != dataset.context_dim:
                raise ConfigError(
                    f"bandit.path: checkpoint dimension {bandit.context_dim} does not "
                    f"match the dataset's {dataset.context_dim}"
                )
        else:
            bandit = BanditModel(
                context_dim=dataset.context_dim,
                alpha=float(bandit_raw.get("alpha", 0.5)),
                reg_lambda=float(bandit_raw.get("reg_lambda", 1.0)),
            )
            if bandit_raw.get("pretrain", True):
                bandit.pretrain(pretraining_samples(dataset, seed=child_seed(seed, 3)))

        env_seed = child_seed(seed, 0)
        policy_seed = child_seed(seed, 1)
        engine = EpisodeEngine(
            dataset, episode_config, np.random.default_rng(np.random.SeedSequence(env_seed))
        )
        return SessionRuntime(
            session_id=session_id,
            raw_config=raw,
            dataset=dataset,
            episode_config=episode_config,
            env_seed=env_seed,
            policy_seed=policy_seed,
            bandit=bandit,
            engine=engine,
            policy_rng=np.random.default_rng(np.random.SeedSequence(policy_seed)),
            surveys_enabled=bool(raw.get("surveys_enabled", True)),
            blinded=bool(raw.get("blinded", True)),
        )

    def create_session(self, raw: dict) -> SessionRuntime:
        live = sum(1 for rt in self._live.values() if rt.phase != "finished")
        on_disk = 0
        for path in self.sessions_dir.glob("*.json"):
            sid = path.stem
            if sid not in self._live:
                try:
                    record = json.loads(path.read_text())
                    on_disk += record.get("phase") != "finished"
                except (OSError, json.JSONDecodeError):
                    continue
        if live + on_disk >= self.capacity:
            raise SessionStoreFull(f"session store holds {self.capacity} live sessions")
        session_id = uuid.uuid4().hex[:12]
        runtime = self._build_runtime(session_id, raw)
        self._live[session_id] = runtime
        runtime.emit("created", {"session_id": session_id})
        self.persist(runtime)
        return runtime

    def get(self, session_id: str) -> SessionRuntime:
        if session_id in self._live:
            return self._live[session_id]
        path = self.sessions_dir / f"{session_id}.json"
        if not path.exists():
            raise UnknownSession(f"no session {session_id!r}")
        runtime = self._rehydrate(json.loads(path.read_text()))
        self._live[session_id] = runtime
        return runtime

    # -- persistence -------------------------------------------------------

    def persist(self, rt: SessionRuntime) -> None:
        record = {
            "schema_version": SESSION_SCHEMA_VERSION,
            "session_id": rt.session_id,
            "config": rt.raw_config,
            "phase": rt.phase,
            "executed": rt.executed,
            "events": rt.events,
            "surveys": rt.surveys,
            "regrets": rt.regrets,
            "tokens": rt.tokens,
            "policy_rng_state": _rng_state_to_json(rt.policy_rng),
            "pending_decision": _decision_to_json(rt.pending_decision),
        }
        path = self.sessions_dir / f"{rt.session_id}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record))
        tmp.replace(path)

    def _rehydrate(self, record: dict) -> SessionRuntime:
        if record.get("schema_version") != SESSION_SCHEMA_VERSION:
            raise ConfigError(f"unsupported session schema {record.get('schema_version')!r}")
        rt = self._build_runtime(record["session_id"], record["config"])
        # Replay recorded actions through a fresh engine; the environment
        # stream is deterministic, so state and rewards reproduce exactly.
        for step in record["executed"]:
            rt.engine.attempt_context()
            if step["continued"]:
                replayed = rt.engine.step(None, bandit=rt.bandit)
            elif step["deferred"]:
                replayed = rt.engine.step(
                    QUERY_ACTION, bandit=rt.bandit, expert_override=step["action"]
                )
            else:
                replayed = rt.engine.step(step["action"], bandit=rt.bandit)
            if replayed.reward != step["reward"]:
                raise ConfigError(f"session {rt.session_id}: replay diverged; store corrupt")
        rt.phase = record["phase"]
        rt.events = record["events"]
        rt.executed = record["executed"]
        rt.surveys = record["surveys"]
        rt.regrets = record["regrets"]
        rt.tokens = {k: int(v) for k, v in record["tokens"].items()}
        rt.policy_rng = _rng_state_from_json(record["policy_rng_state"])
        rt.pending_decision = _decision_from_json(record["pending_decision"])
        if rt.phase == "awaiting_human_action":
            rt.engine.attempt_context()  # re-draw the pending trial
        if rt.phase == "finished":
            rt.engine.finalize()
        return rt

    # -- mutations ---------------------------------------------------------

    def advance(self, rt: SessionRuntime) -> None:
        if rt.phase != "awaiting_policy":
            raise WrongPhase(f"advance requires awaiting_policy, session is {rt.phase}")
        engine = rt.engine
        if engine.finished:
            self._finish(rt)
            self.persist(rt)
            return
        x, food_type, first = engine.attempt_context()
        if engine.committed_action is not None:
            step = engine.step(None, bandit=rt.bandit)
            self._record_step(rt, step, continued=True, decision=None)
            if engine.finished:
                self._finish(rt)
            self.persist(rt)
            return
        decision = policy_decision(
            rt.episode_config.policy, rt.bandit, engine, x, first, rt.episode_config, rt.policy_rng
        )
        if decision.is_query:
            rt.pending_decision = decision
            rt.phase = "awaiting_human_action"
            rt.emit(
                "query_raised",
                {
                    "timestep": engine.t,
                    "food_index": engine.food_index,
                    "food_label": rt.dataset.food(food_type).name,
                    "attempt": engine.attempts_used,
                    "gap": decision.gap,
                    "threshold": decision.threshold,
                },
            )
            self.persist(rt)
            return
        step = engine.step(decision.action, bandit=rt.bandit, decision=decision)
        self._record_step(rt, step, continued=False, decision=decision)
        if engine.finished:
            self._finish(rt)
        self.persist(rt)

    def submit_action(self, rt: SessionRuntime, action: int, token: str | None = None) -> None:
        if token is not None and token in rt.tokens:
            return  # duplicate submission: first result stands
        if rt.phase != "awaiting_human_action":
            raise WrongPhase(f"submit_action requires awaiting_human_action, session is {rt.phase}")
        if action == QUERY_ACTION or not 0 <= action < len(ACTION_LABELS):
            raise InvalidAction(f"action must be a robot action index 0..5, got {action}")
        engine = rt.engine
        x, _, _ = engine.attempt_context()
        oracle = expert_action(rt.dataset, x)
        trial = rt.dataset.find_trial(x)
        rt.regrets.append(
            {
                "timestep": engine.t,
                "submitted": action,
                "oracle": oracle,
                "regret": float(trial.success[oracle] - trial.success[action]),
            }
        )
        decision = rt.pending_decision
        step = engine.step(
            QUERY_ACTION, bandit=rt.bandit, decision=decision, expert_override=action
        )
        rt.pending_decision = None
        self._record_step(rt, step, continued=False, decision=decision)
        if token is not None:
            rt.tokens[token] = step.timestep
        if rt.surveys_enabled:
            rt.phase = "awaiting_survey"
            rt.emit("survey_due", {"timestep": step.timestep})
        else:
            rt.phase = "awaiting_policy"
            if engine.finished:
                self._finish(rt)
        self.persist(rt)

    def submit_survey(self, rt: SessionRuntime, tlx: TlxResponse, token: str | None = None) -> None:
        if token is not None and token in rt.tokens:
            return
        if rt.phase != "awaiting_survey":
            raise WrongPhase(f"submit_survey requires awaiting_survey, session is {rt.phase}")
        engine = rt.engine
        timestep = engine.t - 1  # the step the human just answered
        score = tlx_to_workload(tlx)
        predicted = float(
            rt.episode_config.decision_model.predict_events(
                rt.episode_config.initial_workload, engine.query_history, timestep
            )
        )
        rt.surveys.append({"timestep": timestep, "reported": score, "predicted": predicted})
        rt.emit("survey_recorded", {"timestep": timestep, "reported": score, "predicted": predicted})
        if token is not None:
            rt.tokens[token] = timestep
        rt.phase = "awaiting_policy"
        if engine.finished:
            self._finish(rt)
        self.persist(rt)

    def _record_step(self, rt: SessionRuntime, step, continued: bool, decision) -> None:
        rt.executed.append(
            {
                "action": step.action,
                "deferred": step.deferred,
                "continued": continued,
                "queried": step.queried,
                "reward": step.reward,
                "timestep": step.timestep,
            }
        )
        payload = {
            "timestep": step.timestep,
            "food_index": step.food_index,
            "food_label": rt.dataset.food(step.food_type).name,
            "attempt": step.attempt,
            "action": step.action,
            "action_label": ACTION_LABELS[step.action],
            "deferred": step.deferred,
            "queried": step.queried,
            "reward": step.reward,
            "workload_prediction": self._workload_at(rt, step.timestep),
        }
        if decision is not None and decision.gap is not None:
            payload["gap"] = decision.gap
            payload["threshold"] = decision.threshold
        if not rt.blinded:
            payload["expected_reward"] = step.expected_reward
        rt.emit("step", payload)

    def _finish(self, rt: SessionRuntime) -> None:
        trace = rt.engine.finalize()
        rt.phase = "finished"
        rt.emit(
            "finished",
            {
                "final_workload": trace.final_workload,
                "initial_workload": trace.initial_workload,
                "foods": [
                    {
                        "type_id": f.type_id,
                        "attempts": f.attempts,
                        "converged": f.converged,
                        "queried": f.queried,
                    }
                    for f in trace.foods
                ],
            },
        )

    # -- views ---------------------------------------------------------------

    def _workload_at(self, rt: SessionRuntime, t: int) -> float:
        model = rt.episode_config.decision_model
        return float(
            model.predict_events(rt.episode_config.initial_workload, rt.engine.query_history, t)
        )

    def state_view(self, rt: SessionRuntime) -> dict:
        engine = rt.engine
        finished = rt.phase == "finished"
        pending = None
        if rt.phase == "awaiting_human_action":
            x, food_type, _ = engine.attempt_context()
            d = rt.pending_decision
            pending = {
                "food_label": rt.dataset.food(food_type).name,
                "food_index": engine.food_index,
                "attempt": engine.attempts_used,
                "gap": d.gap if d else None,
                "threshold": d.threshold if d else None,
            }
        current_food = None
        if not finished and engine.food_index < len(rt.episode_config.food_sequence):
            food = rt.dataset.food(engine.current_food)
            current_food = {"label": food.name, "index": engine.food_index}
            if not rt.blinded:
                current_food["success_bars"] = self._mean_success(food)
        reveal = None
        if finished or not rt.blinded:
            reveal = {
                rt.dataset.food(tid).name: self._mean_success(rt.dataset.food(tid))
                for tid in sorted(set(rt.episode_config.food_sequence))
            }
        return {
            "schema_version": SESSION_SCHEMA_VERSION,
            "session_id": rt.session_id,
            "phase": rt.phase,
            "policy": rt.episode_config.policy.kind,
            "n_foods": len(rt.episode_config.food_sequence),
            "food_index": engine.food_index,
            "attempt": engine.attempts_used,
            "timestep": engine.t,
            "max_attempts": rt.episode_config.max_attempts,
            "initial_workload": rt.episode_config.initial_workload,
            "current_food": current_food,
            "pending_query": pending,
            "action_labels": list(ACTION_LABELS),
            "blinded": rt.blinded,
            "surveys_enabled": rt.surveys_enabled,
            "workload_series": [self._workload_at(rt, t) for t in range(max(engine.t, 1))],
            "trace": [
                {
                    "timestep": s.timestep,
                    "food_index": s.food_index,
                    "food_label": rt.dataset.food(s.food_type).name,
                    "attempt": s.attempt,
                    "action": s.action,
                    "action_label": ACTION_LABELS[s.action],
                    "deferred": s.deferred,
                    "queried": s.queried,
                    "reward": s.reward,
                    "gap": s.gap,
                    "threshold": s.threshold,
                }
                for s in engine.trace.steps
            ],
            "surveys": rt.surveys,
            "events_len": len(rt.events),
            "final_workload": engine.trace.final_workload if finished else None,
            "revealed_success": reveal,
        }

    @staticmethod
    def _mean_success(food) -> list[float]:
        return np.mean([t.success for t in food.trials], axis=0).tolist()

    def export_view(self, rt: SessionRuntime) -> dict:
        return {
            "session_id": rt.session_id,
            "phase": rt.phase,
            "surveys": rt.surveys,
            "regret_log": rt.regrets,
            "note": (
                "decision-making used the fixed configured initial workload; "
                "survey-derived scores are reported alongside model predictions"
            ),
            "query_history": [[t, list(q)] for t, q in rt.engine.query_history],
            "executed": rt.executed,
            "final_workload": rt.engine.trace.final_workload if rt.phase == "finished" else None,
        }

    def replay_check(self, rt: SessionRuntime) -> dict:
        """Re-run the recorded actions on a fresh environment stream."""
        engine = EpisodeEngine(
            rt.dataset,
            rt.episode_config,
            np.random.default_rng(np.random.SeedSequence(rt.env_seed)),
        )
        mismatches = []
        for i, step in enumerate(rt.executed):
            engine.attempt_context()
            if step["continued"]:
                replayed = engine.step(None)
            elif step["deferred"]:
                replayed = engine.step(QUERY_ACTION, expert_override=step["action"])
            else:
                replayed = engine.step(step["action"])
            if replayed.reward != step["reward"] or replayed.action != step["action"]:
                mismatches.append(i)
        return {"ok": not mismatches, "steps": len(rt.executed), "mismatches": mismatches}


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))  # plain dict of ints/strings


def _rng_state_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _decision_to_json(d: Decision | None) -> dict | None:
    if d is None:
        return None
    return {
        "action": d.action,
        "gap": d.gap,
        "threshold": d.threshold,
        "predicted_workload": d.predicted_workload,
        "query_probability": d.query_probability,
    }


def _decision_from_json(data: dict | None) -> Decision | None:
    if data is None:
        return None
    return Decision(**data)


def create_app(data_dir: str | Path, static_dir: str | Path | None = None, capacity: int = 64) -> FastAPI:
    service = SessionService(data_dir, capacity=capacity)
    app = FastAPI(title="hilbandit session server")
    app.state.service = service

    @app.exception_handler(ServiceError)
    async def _service_error(_request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"error": str(exc)})

    @app.post("/api/sessions")
    async def create_session(request: Request):
        raw = await request.json()
        runtime = service.create_session(raw if isinstance(raw, dict) else {})
        return {"session_id": runtime.session_id, "state": service.state_view(runtime)}

    @app.get("/api/sessions/{sid}")
    async def get_state(sid: str):
        return {"state": service.state_view(service.get(sid))}

    @app.post("/api/sessions/{sid}/advance")
    async def advance(sid: str):
        rt = service.get(sid)
        async with rt.lock:
            service.advance(rt)
        return {"state": service.state_view(rt)}

    @app.post("/api/sessions/{sid}/action")
    async def submit_action(sid: str, request: Request):
        body = await request.json()
        if "action" not in body:
            raise InvalidAction("body must carry an 'action' index")
        rt = service.get(sid)
        async with rt.lock:
            service.submit_action(rt, int(body["action"]), body.get("token"))
        return {"state": service.state_view(rt)}

    @app.post("/api/sessions/{sid}/survey")
    async def submit_survey(sid: str, request: Request):
        body = await request.json()
        try:
            tlx = TlxResponse(
                mental=body["mental"],
                temporal=body["temporal"],
                performance=body["performance"],
                effort=body["effort"],
                frustration=body["frustration"],
            )
        except (KeyError, TypeError) as err:
            raise InvalidAction(f"survey needs five Likert fields: {err}") from err
        except ValueError as err:
            raise InvalidAction(str(err)) from err
        rt = service.get(sid)
        async with rt.lock:
            service.submit_survey(rt, tlx, body.get("token"))
        return {"state": service.state_view(rt)}

    @app.get("/api/sessions/{sid}/export")
    async def export(sid: str):
        return service.export_view(service.get(sid))

    @app.get("/api/sessions/{sid}/replay")
    async def replay(sid: str):
        return service.replay_check(service.get(sid))

    @app.get("/api/sessions/{sid}/events")
    async def events(sid: str, after: int = -1):
        rt = service.get(sid)

        async def stream():
            cursor = after + 1
            while True:
                # Grab the change marker before draining so an emit during
                # the drain wakes the wait immediately.
                waiter = rt.changed
                while cursor < len(rt.events):
                    event = rt.events[cursor]
                    payload = json.dumps(event["data"])
                    yield f"id: {event['seq']}\nevent: {event['event']}\ndata: {payload}\n\n"
                    cursor += 1
                    if event["event"] == "finished":
                        return
                try:
                    await asyncio.wait_for(waiter.wait(), timeout=30.0)
                except asyncio.TimeoutError:
                    yield ": keepalive\n\n"

        return StreamingResponse(stream(), media_type="text/event-stream")

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app
