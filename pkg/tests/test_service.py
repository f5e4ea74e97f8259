"""Tests for the HTTP service endpoints."""

import time
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from prophet.service.app import app

FIXTURES = Path(__file__).parent / "fixtures"
CASSETTES = FIXTURES / "cassettes"
MANPAGES = Path(__file__).resolve().parents[1] / "src" / "prophet" / "data" / "manpages"


@pytest.fixture(scope="module")
def client():
    with TestClient(app) as c:
        yield c


def replay_ref(name: str) -> dict:
    return {"mode": "replay", "cassette": str(CASSETTES / name)}


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "ok"


def test_parse_endpoint(client):
    resp = client.post("/parse", json={"path": str(MANPAGES / "gif2png.1")})
    assert resp.status_code == 200
    doc = resp.json()["doc"]
    assert doc["program_name"] == "gif2png"
    assert len(doc["options"]) == 15


def test_parse_missing_section_422(client):
    resp = client.post("/parse", json={"text": ".TH X 1\n.SH SYNOPSIS\nx\n"})
    assert resp.status_code == 422
    assert "OPTIONS" in resp.json()["detail"]


def test_render_endpoint(client):
    resp = client.post("/render", json={"text": "\\fB\\-alpha\\fR flag"})
    assert resp.json()["text"] == "-alpha flag"


def test_constraints_predict_assemble_chain(client):
    doc = client.post("/parse", json={"path": str(MANPAGES / "gif2png.1")}).json()["doc"]

    resp = client.post("/constraints", json={
        "doc": doc, "gateway": replay_ref("gif2png.jsonl")})
    assert resp.status_code == 200
    constraints = resp.json()["constraints"]
    assert len(constraints["conflicts"]) == 2

    resp = client.post("/predict", json={
        "doc": doc, "constraints": constraints,
        "gateway": replay_ref("gif2png.jsonl")})
    assert resp.status_code == 200
    combos = resp.json()["combinations"]
    assert combos

    resp = client.post("/assemble", json={
        "doc": doc, "combination": combos[0], "combination_ref": "combo-0000",
        "gateway": replay_ref("gif2png.jsonl")})
    assert resp.status_code == 200
    drafts = resp.json()["drafts"]
    assert drafts and drafts[0]["argv_template"][-1] == "file0"


def test_replay_mode_requires_cassette(client):
    resp = client.post("/constraints", json={
        "doc": {"program_name": "x", "description": "", "synopsis": "", "options": []},
        "gateway": {"mode": "replay"}})
    assert resp.status_code == 422


def test_reconcile_and_command_endpoints(client):
    draft = {
        "combination_ref": "combo-0000",
        "argv_template": ["prog", "-x", "file1", "file0"],
        "values": {},
        "placeholders": [
            {"name": "file0", "format": "bin", "role": "input"},
            {"name": "file1", "format": "cfg", "role": "config"},
        ],
    }
    report = {"exit_status": 0, "wall_time": 0.1,
              "produced_files": [["file0", 4], ["file1_cfg", 9]],
              "stdout_tail": "", "stderr_tail": "", "limit_violations": []}
    resp = client.post("/reconcile", json={"draft": draft, "report": report})
    resolved = resp.json()["resolved"]
    assert resolved == {"file0": "file0", "file1": "file1_cfg"}

    resp = client.post("/command", json={
        "draft": draft, "resolved": resolved, "workdir": "/tmp/work"})
    command = resp.json()["command"]
    assert command["argv"].count("@@") == 1

    short = {"exit_status": 0, "wall_time": 0.1, "produced_files": [["file0", 4]],
             "stdout_tail": "", "stderr_tail": "", "limit_violations": []}
    resp = client.post("/reconcile", json={"draft": draft, "report": short})
    assert resp.json()["excluded"] == "missing files"


def test_triage_endpoint(client):
    text = ("==1==ERROR: AddressSanitizer: heap-buffer-overflow\n"
            "    #0 0x1 in f /a.c:1\n    #1 0x2 in g /a.c:2\n    #2 0x3 in h /a.c:3\n")
    resp = client.post("/triage", json={"reports": [
        {"command_ref": "cmd_000", "input_path": "x", "text": text,
         "combination_ref": "combo-0000"},
        {"command_ref": "cmd_001", "input_path": "y", "text": text,
         "combination_ref": "combo-0001"},
    ]})
    index = resp.json()["index"]
    assert len(index["vulns"]) == 1
    assert sorted(index["vulns"][0]["combinations"]) == ["combo-0000", "combo-0001"]


def test_metrics_endpoint(client):
    text = ("==1==ERROR: AddressSanitizer: SEGV\n"
            "    #0 0x1 in f /a.c:1\n    #1 0x2 in g /a.c:2\n    #2 0x3 in h /a.c:3\n")
    body = {
        "program": "toy",
        "indexes": [{"reports": [
            {"command_ref": "cmd_000", "input_path": "x", "text": text,
             "combination_ref": "combo-0000"}]}],
        "predicted_refs": ["combo-0000", "combo-0001"],
        "command_count": 2,
    }
    resp = client.post("/metrics", json=body)
    metrics = resp.json()["metrics"]
    assert metrics["unique_vulnerability_count"] == 1
    assert metrics["vulnerable_combination_ratio_pct"] == "50.00%"
    assert "| toy |" in resp.json()["markdown"]


def test_knowledge_endpoint_missing_dir_404(client):
    resp = client.post("/knowledge", json={
        "cot_dir": "/nonexistent/cot", "gateway": replay_ref("gif2png.jsonl")})
    assert resp.status_code == 404


def test_full_run_background_job(client, tmp_path):
    body = {
        "doc_path": str(MANPAGES / "gif2png.1"),
        "out_dir": str(tmp_path / "run"),
        "gateway": replay_ref("gif2png.jsonl"),
    }
    run_id = client.post("/runs", json=body).json()["run_id"]
    for _ in range(200):
        status = client.get(f"/runs/{run_id}").json()
        if status["state"] in ("done", "failed"):
            break
        time.sleep(0.05)
    assert status["state"] == "done", status
    assert status["stages"]["combinations_predicted"] == 3
    assert (tmp_path / "run" / "predictions.json").exists()
    assert any(r["run_id"] == run_id for r in client.get("/runs").json()["runs"])


def test_run_with_unknown_doc_404(client):
    resp = client.post("/runs", json={
        "doc_path": "/nope.1", "out_dir": "/tmp/x",
        "gateway": replay_ref("gif2png.jsonl")})
    assert resp.status_code == 404
