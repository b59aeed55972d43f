from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from hilbandit.service import create_app

SESSION_DEFAULTS = {
    "seed": 3,
    "dataset": {"seed": 0, "context_dim": 8, "n_types": 6, "n_trials": 5},
    "foods": {"split": "test", "count": 3},
    "policy": {"kind": "always_query"},
    "workload_model": {"floor_scale": 1.0, "history_len": 10},
    "max_attempts": 5,
    "initial_workload": 0.5,
}


def session_body(**overrides) -> dict:
    body = json.loads(json.dumps(SESSION_DEFAULTS))
    body.update(overrides)
    return body


@pytest.fixture()
def client(tmp_path):
    app = create_app(tmp_path / "data")
    with TestClient(app) as c:
        yield c


def create_session(client, **overrides) -> tuple[str, dict]:
    resp = client.post("/api/sessions", json=session_body(**overrides))
    assert resp.status_code == 200, resp.text
    payload = resp.json()
    return payload["session_id"], payload["state"]


def run_human_loop(client, sid, action_picker, survey=None, max_rounds=200):
    """Advance until finished, answering queries (and surveys) as they come."""
    actions, surveys = [], []
    for _ in range(max_rounds):
        state = client.get(f"/api/sessions/{sid}").json()["state"]
        phase = state["phase"]
        if phase == "finished":
            return state, actions, surveys
        if phase == "awaiting_policy":
            client.post(f"/api/sessions/{sid}/advance")
        elif phase == "awaiting_human_action":
            action = action_picker(state)
            actions.append(action)
            resp = client.post(f"/api/sessions/{sid}/action", json={"action": action})
            assert resp.status_code == 200, resp.text
        elif phase == "awaiting_survey":
            body = survey or {"mental": 2, "temporal": 2, "performance": 4, "effort": 2, "frustration": 1}
            surveys.append(body)
            resp = client.post(f"/api/sessions/{sid}/survey", json=body)
            assert resp.status_code == 200, resp.text
    raise AssertionError("session did not finish")


class TestSessionLifecycle:
    def test_create(self, client):
        sid, state = create_session(client)
        assert state["phase"] == "awaiting_policy"
        assert state["n_foods"] == 3
        assert len(sid) == 12

    def test_distinct_ids(self, client):
        a, _ = create_session(client)
        b, _ = create_session(client)
        assert a != b

    def test_bad_attempt_cap_rejected(self, client):
        resp = client.post("/api/sessions", json=session_body(max_attempts=0))
        assert resp.status_code == 422
        assert "max_attempts" in resp.json()["error"]

    def test_unknown_session(self, client):
        assert client.get("/api/sessions/nope").status_code == 404

    def test_capacity_bound(self, tmp_path):
        app = create_app(tmp_path / "data", capacity=2)
        with TestClient(app) as client:
            create_session(client)
            create_session(client)
            resp = client.post("/api/sessions", json=session_body())
            assert resp.status_code == 429


class TestPhaseMachine:
    def test_linucb_never_defers(self, client):
        sid, _ = create_session(client, policy={"kind": "linucb"})
        state, actions, surveys = run_human_loop(client, sid, lambda s: 0)
        assert actions == [] and surveys == []
        assert all(not row["deferred"] for row in state["trace"])

    def test_always_query_full_loop(self, client):
        sid, _ = create_session(client)
        state, actions, surveys = run_human_loop(client, sid, lambda s: 0)
        assert len(actions) == 3  # one human answer per food
        assert len(surveys) == 3
        queried_rows = [r for r in state["trace"] if r["queried"]]
        assert len(queried_rows) == 3
        assert all(r["action"] == 0 for r in queried_rows)  # recorded verbatim

    def test_action_in_wrong_phase(self, client):
        sid, _ = create_session(client)
        resp = client.post(f"/api/sessions/{sid}/action", json={"action": 0})
        assert resp.status_code == 409

    def test_query_action_rejected(self, client):
        sid, _ = create_session(client)
        client.post(f"/api/sessions/{sid}/advance")
        resp = client.post(f"/api/sessions/{sid}/action", json={"action": 6})
        assert resp.status_code == 422

    def test_survey_follows_every_human_action(self, client):
        sid, _ = create_session(client)
        client.post(f"/api/sessions/{sid}/advance")
        state = client.get(f"/api/sessions/{sid}").json()["state"]
        assert state["phase"] == "awaiting_human_action"
        client.post(f"/api/sessions/{sid}/action", json={"action": 2})
        state = client.get(f"/api/sessions/{sid}").json()["state"]
        assert state["phase"] == "awaiting_survey"

    def test_surveys_can_be_disabled(self, client):
        sid, _ = create_session(client, surveys_enabled=False)
        state, actions, surveys = run_human_loop(client, sid, lambda s: 1)
        assert surveys == [] and len(actions) == 3
        assert state["phase"] == "finished"

    def test_all_ones_survey_scores_zero(self, client):
        sid, _ = create_session(client)
        client.post(f"/api/sessions/{sid}/advance")
        client.post(f"/api/sessions/{sid}/action", json={"action": 0})
        body = {"mental": 1, "temporal": 1, "performance": 1, "effort": 1, "frustration": 1}
        client.post(f"/api/sessions/{sid}/survey", json=body)
        state = client.get(f"/api/sessions/{sid}").json()["state"]
        assert state["surveys"][0]["reported"] == 0.0
        assert state["surveys"][0]["timestep"] == 0

    def test_invalid_survey_rejected(self, client):
        sid, _ = create_session(client)
        client.post(f"/api/sessions/{sid}/advance")
        client.post(f"/api/sessions/{sid}/action", json={"action": 0})
        resp = client.post(
            f"/api/sessions/{sid}/survey",
            json={"mental": 6, "temporal": 1, "performance": 1, "effort": 1, "frustration": 1},
        )
        assert resp.status_code == 422
        assert "mental" in resp.json()["error"]

    def test_fresh_query_gap_defers_immediately(self, client):
        sid, _ = create_session(
            client,
            policy={"kind": "query_gap", "gap_scale": 0.0},
            bandit={"pretrain": False},
        )
        client.post(f"/api/sessions/{sid}/advance")
        state = client.get(f"/api/sessions/{sid}").json()["state"]
        assert state["phase"] == "awaiting_human_action"
        assert state["pending_query"]["gap"] > 0


class TestIdempotency:
    def test_duplicate_action_token(self, client):
        sid, _ = create_session(client)
        client.post(f"/api/sessions/{sid}/advance")
        first = client.post(f"/api/sessions/{sid}/action", json={"action": 3, "token": "t1"})
        assert first.status_code == 200
        before = client.get(f"/api/sessions/{sid}").json()["state"]
        dup = client.post(f"/api/sessions/{sid}/action", json={"action": 4, "token": "t1"})
        assert dup.status_code == 200
        after = dup.json()["state"]
        assert len(after["trace"]) == len(before["trace"])
        assert after["trace"][-1]["action"] == 3


class TestExportAndReplay:
    def test_regret_logged_for_suboptimal_answer(self, client):
        sid, _ = create_session(client, surveys_enabled=False)
        state, actions, _ = run_human_loop(client, sid, lambda s: 1)
        export = client.get(f"/api/sessions/{sid}/export").json()
        assert len(export["regret_log"]) == 3
        assert all(r["regret"] >= 0 for r in export["regret_log"])
        assert all(r["submitted"] == 1 for r in export["regret_log"])

    def test_survey_pairs_exported(self, client):
        sid, _ = create_session(client)
        run_human_loop(client, sid, lambda s: 0)
        export = client.get(f"/api/sessions/{sid}/export").json()
        assert len(export["surveys"]) == 3
        for rec in export["surveys"]:
            assert {"timestep", "reported", "predicted"} <= set(rec)
        assert export["final_workload"] is not None

    def test_replay_matches(self, client):
        sid, _ = create_session(client)
        run_human_loop(client, sid, lambda s: 2)
        replay = client.get(f"/api/sessions/{sid}/replay").json()
        assert replay["ok"] is True
        assert replay["mismatches"] == []
        assert replay["steps"] > 0


class TestEventStream:
    def test_full_stream_and_resume(self, client):
        sid, _ = create_session(client)
        run_human_loop(client, sid, lambda s: 0)

        def read_events(after):
            seqs, kinds = [], []
            with client.stream("GET", f"/api/sessions/{sid}/events?after={after}") as resp:
                event_kind = None
                for line in resp.iter_lines():
                    if line.startswith("id: "):
                        seqs.append(int(line[4:]))
                    elif line.startswith("event: "):
                        event_kind = line[7:]
                        kinds.append(event_kind)
            return seqs, kinds

        seqs, kinds = read_events(-1)
        assert seqs == list(range(len(seqs)))  # no gaps, no duplicates
        assert kinds[0] == "created" and kinds[-1] == "finished"
        assert kinds.count("query_raised") == 3
        assert kinds.count("survey_recorded") == 3

        mid = len(seqs) // 2
        resumed, _ = read_events(seqs[mid])
        assert resumed == seqs[mid + 1 :]

    def test_blinded_events_hide_expected_reward(self, client):
        sid, _ = create_session(client)
        run_human_loop(client, sid, lambda s: 0)
        with client.stream("GET", f"/api/sessions/{sid}/events?after=-1") as resp:
            payloads = [line[6:] for line in resp.iter_lines() if line.startswith("data: ")]
        for raw in payloads:
            assert "expected_reward" not in json.loads(raw)


class TestBanditCheckpoint:
    def test_session_loads_checkpoint(self, tmp_path):
        import numpy as np

        from hilbandit.bandit import BanditModel
        from hilbandit.runner import child_seed
        from hilbandit.simenv import generate_food_dataset, pretraining_samples

        data_dir = tmp_path / "data"
        data_dir.mkdir()
        dataset = generate_food_dataset(seed=0, context_dim=8, n_types=6, n_trials=5)
        model = BanditModel(context_dim=8)
        model.pretrain(pretraining_samples(dataset, seed=child_seed(3, 3)))
        model.save(data_dir / "bandit.json")

        app = create_app(data_dir)
        with TestClient(app) as client:
            sid, _ = create_session(client, bandit={"path": "bandit.json"}, policy={"kind": "linucb"})
            state, _, _ = run_human_loop(client, sid, lambda s: 0)
            assert state["phase"] == "finished"
            # the loaded estimators are the pretrained ones: identical first action
            fresh_sid, _ = create_session(client, policy={"kind": "linucb"})
            fresh_state, _, _ = run_human_loop(client, fresh_sid, lambda s: 0)
            assert state["trace"][0]["action"] == fresh_state["trace"][0]["action"]

    def test_dimension_mismatch_rejected(self, tmp_path):
        from hilbandit.bandit import BanditModel

        data_dir = tmp_path / "data"
        data_dir.mkdir()
        BanditModel(context_dim=4).save(data_dir / "bad.json")
        app = create_app(data_dir)
        with TestClient(app) as client:
            resp = client.post("/api/sessions", json=session_body(bandit={"path": "bad.json"}))
            assert resp.status_code == 422


class TestDurability:
    def test_restart_preserves_phase_and_trace(self, tmp_path):
        data_dir = tmp_path / "data"
        app1 = create_app(data_dir)
        with TestClient(app1) as c1:
            sid, _ = create_session(c1)
            c1.post(f"/api/sessions/{sid}/advance")
            c1.post(f"/api/sessions/{sid}/action", json={"action": 0})
            before = c1.get(f"/api/sessions/{sid}").json()["state"]
            assert before["phase"] == "awaiting_survey"

        app2 = create_app(data_dir)
        with TestClient(app2) as c2:
            after = c2.get(f"/api/sessions/{sid}").json()["state"]
            assert after["phase"] == "awaiting_survey"
            assert after["trace"] == before["trace"]
            body = {"mental": 2, "temporal": 2, "performance": 3, "effort": 2, "frustration": 2}
            assert c2.post(f"/api/sessions/{sid}/survey", json=body).status_code == 200
            state, actions, surveys = run_human_loop(c2, sid, lambda s: 0)
            assert state["phase"] == "finished"
            replay = c2.get(f"/api/sessions/{sid}/replay").json()
            assert replay["ok"] is True

    def test_restart_of_finished_session(self, tmp_path):
        data_dir = tmp_path / "data"
        with TestClient(create_app(data_dir)) as c1:
            sid, _ = create_session(c1, policy={"kind": "linucb"})
            state, _, _ = run_human_loop(c1, sid, lambda s: 0)
            final = state["final_workload"]
        with TestClient(create_app(data_dir)) as c2:
            state = c2.get(f"/api/sessions/{sid}").json()["state"]
            assert state["phase"] == "finished"
            assert state["final_workload"] == final
