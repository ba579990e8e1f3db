import pytest
from fastapi.testclient import TestClient

from madctx.context import save_pool
from madctx.main import create_app
from madctx.schemas import RunConfig
from madctx.synthetic import make_pool


@pytest.fixture
def config(tmp_path):
    save_pool(make_pool(6, seed=0), tmp_path / "pool.json")
    return RunConfig(
        pool_path=str(tmp_path / "pool.json"),
        checkpoint_dir=str(tmp_path / "checkpoints"),
        d_model=16,
        n_tokens=4,
        scale_dim=8,
        n_agents=2,
        max_rounds=2,
    )


@pytest.fixture
def client(config):
    return TestClient(create_app(config))


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_pool_lists_entries_in_id_order(client):
    response = client.get("/pool")
    assert response.status_code == 200
    assert [e["id"] for e in response.json()] == [f"ctx-{i:03d}" for i in range(6)]


def test_missing_pool_is_not_found(config, tmp_path):
    config = config.model_copy(update={"pool_path": str(tmp_path / "absent.json")})
    assert TestClient(create_app(config)).get("/pool").status_code == 404


def test_selection_needs_a_trained_projector(client):
    response = client.post("/selections", json={"problem": "What is 2 plus 2 ?"})
    assert response.status_code == 409


def test_fixed_context_discussion(client):
    body = {
        "problem_id": "q-api",
        "problem": "What is 3 plus 4 ?",
        "candidates": ["6", "7", "8"],
        "answer": "7",
        "fixed_context": True,
    }
    response = client.post("/discussions", json=body)
    assert response.status_code == 200
    payload = response.json()
    assert len(payload["records"]) == 2 * 2
    assert payload["summary"]["problem_id"] == "q-api"
    assert payload["summary"]["final_answer"] in body["candidates"]
    assert len(payload["summary"]["discrepancy_series"]) == 2


def test_discussion_without_checkpoints_conflicts(client):
    body = {"problem_id": "q-api", "problem": "What is 3 plus 4 ?", "candidates": ["7"]}
    assert client.post("/discussions", json=body).status_code == 409


def test_discussion_validates_body(client):
    assert client.post("/discussions", json={"problem_id": "q", "problem": "p", "candidates": []}).status_code == 422


def test_bounds_report_every_check(client):
    response = client.post("/bounds", json={"seed": 2, "samples": 2})
    assert response.status_code == 200
    reports = response.json()
    assert len(reports) == 12
    assert all(r["holds"] for r in reports)
