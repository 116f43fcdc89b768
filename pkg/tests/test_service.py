import json
from datetime import datetime, timezone
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from labelaid.corpus import save_corpus, save_labeled
from labelaid.orchestrator import (
    event_to_json_line,
    study_config_from_dict,
    study_config_to_dict,
)
from labelaid.service.app import create_app
from labelaid.service.config import ServiceConfig, load_service_config
from labelaid.service.store import LogCorruptError, crc32c, read_log
from labelaid.simharness import generate_study_inputs

from conftest import small_study_config

NOW = datetime(2021, 3, 1, tzinfo=timezone.utc).isoformat()


def study_config_dict(**overrides):
    cfg = small_study_config(**overrides)
    return study_config_to_dict(cfg)


@pytest.fixture
def service_env(tmp_path):
    """Data dir plus corpus/gold files for a small study."""
    cfg = small_study_config()
    pool, expert_gold, oracle = generate_study_inputs(cfg, expert_size=24, seed=5)
    corpus_path = tmp_path / "pool.jsonl"
    gold_path = tmp_path / "gold.jsonl"
    save_corpus(pool, corpus_path)
    save_labeled(expert_gold, gold_path)
    data_dir = tmp_path / "data"
    service_cfg = ServiceConfig(data_dir=data_dir)
    return {
        "tmp": tmp_path,
        "service_cfg": service_cfg,
        "corpus_path": str(corpus_path),
        "gold_path": str(gold_path),
        "oracle": oracle,
        "study_cfg": cfg,
    }


def create_study(client, env, **overrides):
    resp = client.post(
        "/v1/studies",
        json={
            "corpus_path": env["corpus_path"],
            "expert_gold_path": env["gold_path"],
            "config": study_config_dict(**overrides),
        },
    )
    assert resp.status_code == 200, resp.text
    return resp.json()


def auth(token):
    return {"Authorization": f"Bearer {token}"}


def test_crc32c_known_vector():
    # standard check value for the Castagnoli polynomial
    assert crc32c(b"123456789") == 0xE3069283


def test_create_and_register_round_robin(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    created = create_study(client, service_env)
    study_id = created["study_id"]
    seen_groups = []
    for _ in range(6):
        resp = client.post(f"/v1/studies/{study_id}/annotators", json={})
        assert resp.status_code == 200
        seen_groups.append(resp.json()["group"])
    assert seen_groups == ["G1", "G2", "G3", "G1", "G2", "G3"]
    resp = client.post(f"/v1/studies/{study_id}/annotators", json={})
    assert resp.status_code == 409


def test_register_explicit_group_and_unknown_group(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    resp = client.post(f"/v1/studies/{study_id}/annotators", json={"group": "G3"})
    assert resp.json()["annotator_id"].startswith("G3-")
    resp = client.post(f"/v1/studies/{study_id}/annotators", json={"group": "G9"})
    assert resp.status_code == 400


def test_unknown_study_404(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    resp = client.get("/v1/studies/nope/next", headers=auth("x"))
    assert resp.status_code == 404


def test_bad_token_401(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    assert client.get(f"/v1/studies/{study_id}/next").status_code == 401
    resp = client.get(f"/v1/studies/{study_id}/next", headers=auth("wrong"))
    assert resp.status_code == 401


def test_g1_receives_no_suggestion(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    reg = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()
    item = client.get(f"/v1/studies/{study_id}/next", headers=auth(reg["token"])).json()
    assert item["suggestion"] is None
    assert item["position"] == 1
    assert item["total"] == 10


def test_g2_receives_suggestion_with_confidence(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    reg = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G2"}
    ).json()
    item = client.get(f"/v1/studies/{study_id}/next", headers=auth(reg["token"])).json()
    assert item["suggestion"] is not None
    assert 0.0 <= item["suggestion"]["confidence"] <= 1.0


def test_next_advances_exactly_one_position(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    first = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
    # repeated next without a submit serves the same position
    again = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
    assert again["position"] == first["position"] == 1
    assert again["doc_id"] == first["doc_id"]
    client.post(
        f"/v1/studies/{study_id}/annotations",
        headers=auth(token),
        json={"doc_id": first["doc_id"], "chosen": "Comment", "started_at": NOW},
    )
    after = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
    assert after["position"] == 2
    assert after["doc_id"] != first["doc_id"]


def run_round(client, study_id, token, oracle, n=None):
    """Annotate until the round completes (or n items); oracle labels."""
    done = 0
    while n is None or done < n:
        item = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
        if item["done"]:
            return item
        resp = client.post(
            f"/v1/studies/{study_id}/annotations",
            headers=auth(token),
            json={
                "doc_id": item["doc_id"],
                "chosen": oracle[item["doc_id"]].name,
                "started_at": NOW,
            },
        )
        assert resp.status_code == 200, resp.text
        done += 1
    return None


def test_submit_idempotent_same_payload(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    reg = client.post(f"/v1/studies/{study_id}/annotators", json={"group": "G2"}).json()
    token = reg["token"]
    item = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
    payload = {"doc_id": item["doc_id"], "chosen": "Comment", "started_at": NOW}
    first = client.post(
        f"/v1/studies/{study_id}/annotations", headers=auth(token), json=payload
    ).json()
    second = client.post(
        f"/v1/studies/{study_id}/annotations", headers=auth(token), json=payload
    ).json()
    assert first == second
    runtime = app.state.registry[study_id]
    events = [e for e in runtime.study.events if e.annotator_id == reg["annotator_id"]]
    assert len(events) == 1


def test_submit_conflicting_label_409(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    item = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
    base = {"doc_id": item["doc_id"], "chosen": "Comment", "started_at": NOW}
    assert (
        client.post(
            f"/v1/studies/{study_id}/annotations", headers=auth(token), json=base
        ).status_code
        == 200
    )
    conflict = dict(base, chosen="Refute")
    resp = client.post(
        f"/v1/studies/{study_id}/annotations", headers=auth(token), json=conflict
    )
    assert resp.status_code == 409


def test_submit_out_of_order_409(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    client.get(f"/v1/studies/{study_id}/next", headers=auth(token))
    resp = client.post(
        f"/v1/studies/{study_id}/annotations",
        headers=auth(token),
        json={"doc_id": "never-served", "chosen": "Comment", "started_at": NOW},
    )
    assert resp.status_code == 409


def test_round_complete_and_finish_flow(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    signal = run_round(client, study_id, token, service_env["oracle"])
    assert signal == {
        "done": True,
        "round_complete": True,
        "study_complete": False,
        "doc_id": None,
        "text": None,
        "round": None,
        "position": None,
        "total": None,
        "suggestion": None,
    }
    summary = client.post(
        f"/v1/studies/{study_id}/finish-round", headers=auth(token)
    ).json()
    assert summary["round"] == 1
    assert summary["n_items"] == 10
    assert not summary["study_complete"]
    signal = run_round(client, study_id, token, service_env["oracle"])
    assert signal["round_complete"]
    summary = client.post(
        f"/v1/studies/{study_id}/finish-round", headers=auth(token)
    ).json()
    assert summary["study_complete"]
    item = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
    assert item["study_complete"]


def test_premature_finish_round_409(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    resp = client.post(f"/v1/studies/{study_id}/finish-round", headers=auth(token))
    assert resp.status_code == 409


def test_g3_retrain_scheduled_and_drained(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    reg = client.post(f"/v1/studies/{study_id}/annotators", json={"group": "G3"}).json()
    token = reg["token"]
    oracle = service_env["oracle"]
    scheduled = 0
    while True:
        item = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
        if item["done"]:
            break
        ack = client.post(
            f"/v1/studies/{study_id}/annotations",
            headers=auth(token),
            json={
                "doc_id": item["doc_id"],
                "chosen": oracle[item["doc_id"]].name,
                "started_at": NOW,
            },
        ).json()
        scheduled += ack["retrain_scheduled"]
    assert scheduled == 2  # 6 new items, batch of 3
    runtime = app.state.registry[study_id]
    runtime.retrainer.drain()
    profile = runtime.study.profiles[reg["annotator_id"]]
    assert profile.completed_retrains == 2
    snapshots = runtime.snapshot_store.versions(reg["annotator_id"])
    assert [s.version for s in snapshots] == [1, 2]


def test_export_matches_orchestrator_export(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    created = create_study(client, service_env)
    study_id, admin = created["study_id"], created["admin_token"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G2"}
    ).json()["token"]
    run_round(client, study_id, token, service_env["oracle"], n=7)
    resp = client.get(f"/v1/studies/{study_id}/export", headers=auth(admin))
    assert resp.status_code == 200
    runtime = app.state.registry[study_id]
    expected = "".join(
        event_to_json_line(e) + "\n" for e in runtime.study.events
    ).encode()
    assert resp.content == expected
    # annotator token is not an admin credential
    resp = client.get(f"/v1/studies/{study_id}/export", headers=auth(token))
    assert resp.status_code == 401


def test_submits_are_durable_before_ack(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    run_round(client, study_id, token, service_env["oracle"], n=3)
    log_path = service_env["service_cfg"].data_dir / study_id / "events.log"
    records = read_log(log_path)
    assert len(records) == 3


def test_metrics_endpoints(service_env):
    app = create_app(service_env["service_cfg"])
    client = TestClient(app)
    created = create_study(client, service_env)
    study_id, admin = created["study_id"], created["admin_token"]
    oracle = service_env["oracle"]
    tokens = {}
    for group in ("G1", "G2", "G3"):
        for _ in range(2):
            reg = client.post(
                f"/v1/studies/{study_id}/annotators", json={"group": group}
            ).json()
            tokens[reg["annotator_id"]] = reg["token"]
    for token in tokens.values():
        run_round(client, study_id, token, oracle)
        client.post(f"/v1/studies/{study_id}/finish-round", headers=auth(token))
    app.state.registry[study_id].retrainer.drain()

    agreement = client.get(
        f"/v1/studies/{study_id}/metrics",
        params={"report": "agreement"},
        headers=auth(admin),
    ).json()
    groups = {r["group"] for r in agreement["agreement"]}
    assert groups == {"G1", "G2", "G3"}
    assert "rendered" in agreement

    bias = client.get(
        f"/v1/studies/{study_id}/metrics",
        params={"report": "bias"},
        headers=auth(admin),
    ).json()
    assert "G2" in bias["acceptance"]["per_group"]
    assert len(bias["correction_matrix"]["counts"]) == 4
    assert set(bias["divergence"]) <= {"G3-01", "G3-02"}

    transfer = client.get(
        f"/v1/studies/{study_id}/metrics",
        params={"report": "transfer", "runs": 2},
        headers=auth(admin),
    ).json()
    assert transfer["groups"] == ["G1", "G2", "G3"]
    assert len(transfer["mean"]) == 3

    resp = client.get(
        f"/v1/studies/{study_id}/metrics",
        params={"report": "bogus"},
        headers=auth(admin),
    )
    assert resp.status_code == 400


def test_recovery_restores_state(service_env):
    service_cfg = service_env["service_cfg"]
    app = create_app(service_cfg)
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    reg = client.post(f"/v1/studies/{study_id}/annotators", json={"group": "G3"}).json()
    token = reg["token"]
    run_round(client, study_id, token, service_env["oracle"], n=7)
    app.state.registry[study_id].retrainer.drain()
    before = client.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()

    # a fresh app instance over the same data dir is the "post-crash" server
    app2 = create_app(service_cfg)
    client2 = TestClient(app2)
    after = client2.get(f"/v1/studies/{study_id}/next", headers=auth(token)).json()
    assert after == before
    runtime2 = app2.state.registry[study_id]
    assert runtime2.study.profiles[reg["annotator_id"]].non_control_count > 0


def test_recovery_empty_log_is_fresh_study(service_env):
    service_cfg = service_env["service_cfg"]
    app = create_app(service_cfg)
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    app2 = create_app(service_cfg)
    assert study_id in app2.state.registry
    assert app2.state.registry[study_id].study.events == []


def test_recovery_drops_truncated_final_line(service_env):
    service_cfg = service_env["service_cfg"]
    app = create_app(service_cfg)
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    run_round(client, study_id, token, service_env["oracle"], n=3)
    log_path = service_cfg.data_dir / study_id / "events.log"
    raw = log_path.read_bytes()
    log_path.write_bytes(raw[:-25])  # cut into the final record

    app2 = create_app(service_cfg)
    runtime = app2.state.registry[study_id]
    assert len(runtime.study.events) == 2
    # the next item served is the one whose submit got lost
    item = TestClient(app2).get(
        f"/v1/studies/{study_id}/next", headers=auth(token)
    ).json()
    assert item["position"] == 3


def test_recovery_refuses_mid_log_corruption(service_env):
    service_cfg = service_env["service_cfg"]
    app = create_app(service_cfg)
    client = TestClient(app)
    study_id = create_study(client, service_env)["study_id"]
    token = client.post(
        f"/v1/studies/{study_id}/annotators", json={"group": "G1"}
    ).json()["token"]
    run_round(client, study_id, token, service_env["oracle"], n=3)
    log_path = service_cfg.data_dir / study_id / "events.log"
    lines = log_path.read_bytes().splitlines(keepends=True)
    lines[1] = lines[1].replace(b'"chosen"', b'"chosex"', 1)  # breaks the checksum
    log_path.write_bytes(b"".join(lines))
    with pytest.raises(LogCorruptError, match="line 2"):
        create_app(service_cfg)


def test_load_service_config_env_overrides(tmp_path, monkeypatch):
    cfg_file = tmp_path / "svc.toml"
    cfg_file.write_text(
        '[server]\nlisten_addr = "0.0.0.0:9000"\ndata_dir = "/tmp/x"\n'
        "[study]\nseed = 7\n",
        encoding="utf-8",
    )
    cfg = load_service_config(cfg_file)
    assert cfg.listen_addr == "0.0.0.0:9000"
    assert cfg.study_seed == 7
    monkeypatch.setenv("LISTEN_ADDR", "127.0.0.1:9100")
    monkeypatch.setenv("DATA_DIR", str(tmp_path / "dd"))
    monkeypatch.setenv("STUDY_SEED", "42")
    cfg = load_service_config(cfg_file)
    assert cfg.listen_addr == "127.0.0.1:9100"
    assert cfg.data_dir == tmp_path / "dd"
    assert cfg.study_seed == 42
