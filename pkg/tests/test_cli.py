"""Tests for the thin-client CLI (in-process service)."""

import json
from pathlib import Path

from prophet.cli import main

FIXTURES = Path(__file__).parent / "fixtures"
CASSETTES = FIXTURES / "cassettes"
MANPAGES = Path(__file__).resolve().parents[1] / "src" / "prophet" / "data" / "manpages"


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out


def test_parse_subcommand(tmp_path, capsys):
    out_file = tmp_path / "doc.json"
    code, _ = run_cli(capsys, "parse", "--doc", str(MANPAGES / "gif2png.1"),
                      "-o", str(out_file))
    assert code == 0
    doc = json.loads(out_file.read_text())
    assert doc["program_name"] == "gif2png"


def test_render_subcommand(tmp_path, capsys):
    src = tmp_path / "x.1"
    src.write_text("\\fB\\-v\\fR verbose o\bo")
    code, out = run_cli(capsys, "render", str(src))
    assert code == 0
    assert out == "-v verbose o"


def test_parse_from_stdin(capsys, monkeypatch):
    import io
    monkeypatch.setattr("sys.stdin", io.StringIO(
        ".TH STDIN 1\n.SH SYNOPSIS\nstdin [-v]\n.SH OPTIONS\n.TP\n.B \\-v\nverbose\n"))
    code, out = run_cli(capsys, "parse", "--doc", "-")
    assert code == 0
    doc = json.loads(out)
    assert doc["program_name"] == "STDIN"


def test_constraints_predict_assemble_flow(tmp_path, capsys):
    doc_file = tmp_path / "doc.json"
    run_cli(capsys, "parse", "--doc", str(MANPAGES / "gif2png.1"), "-o", str(doc_file))

    constraints_file = tmp_path / "constraints.json"
    code, _ = run_cli(capsys, "constraints", "--doc-json", str(doc_file),
                      "--replay", str(CASSETTES / "gif2png.jsonl"),
                      "-o", str(constraints_file))
    assert code == 0
    constraints = json.loads(constraints_file.read_text())
    assert len(constraints["conflicts"]) == 2

    predictions_file = tmp_path / "predictions.json"
    code, _ = run_cli(capsys, "predict", "--doc-json", str(doc_file),
                      "--constraints", str(constraints_file),
                      "--replay", str(CASSETTES / "gif2png.jsonl"),
                      "-o", str(predictions_file))
    assert code == 0
    combos = json.loads(predictions_file.read_text())
    assert len(combos) == 3

    drafts_file = tmp_path / "drafts.json"
    code, _ = run_cli(capsys, "assemble", "--doc-json", str(doc_file),
                      "--predictions", str(predictions_file), "--index", "0",
                      "--replay", str(CASSETTES / "gif2png.jsonl"),
                      "-o", str(drafts_file))
    assert code == 0
    drafts = json.loads(drafts_file.read_text())
    assert drafts[0]["argv_template"][0] == "gif2png"


def test_run_subcommand_stages_only(tmp_path, capsys):
    out_file = tmp_path / "status.json"
    code, _ = run_cli(capsys, "run", "--doc", str(MANPAGES / "gif2png.1"),
                      "--out-dir", str(tmp_path / "run"),
                      "--replay", str(CASSETTES / "gif2png.jsonl"),
                      "--poll", "0.05", "-o", str(out_file))
    assert code == 0
    status = json.loads(out_file.read_text())
    assert status["state"] == "done"
    assert (tmp_path / "run" / "report.json").exists()


def test_knowledge_subcommand(tmp_path, capsys):
    run_cli(capsys, "run", "--doc", str(MANPAGES / "gif2png.1"),
            "--out-dir", str(tmp_path / "run"),
            "--replay", str(CASSETTES / "gif2png.jsonl"), "--poll", "0.05")
    capsys.readouterr()
    code, out = run_cli(capsys, "knowledge", "--cot-dir", str(tmp_path / "run" / "cot_logs"),
                        "--replay", str(CASSETTES / "gif2png.jsonl"))
    assert code == 0
    assert out.splitlines()[0].startswith("1. Resource Management and Limits")


def test_eval_constraints_subcommand(tmp_path, capsys):
    constraints = {
        "conflicts": [
            {"options": ["-d", "-s"], "verdict": {"rounds": [["yes", "no"]] * 9,
                                                  "affirm_count": 9, "threshold": 5,
                                                  "valid": True}},
        ],
        "dependencies": [],
    }
    constraints_file = tmp_path / "c.json"
    constraints_file.write_text(json.dumps(constraints))
    annotations_file = tmp_path / "ann.json"
    annotations_file.write_text(json.dumps([
        {"kind": "conflict", "options": ["-d", "-s"], "label": "TP", "program": "gif2png"},
        {"kind": "conflict", "options": ["-i", "-r"], "label": "TP", "program": "gif2png"},
    ]))
    out_file = tmp_path / "eval.json"
    code, _ = run_cli(capsys, "eval-constraints", "--constraints", str(constraints_file),
                      "--annotations", str(annotations_file), "-o", str(out_file))
    assert code == 0
    report = json.loads(out_file.read_text())
    assert report["overall"]["precision"] == 1.0
    assert report["overall"]["recall"] == 0.5


def test_diff_subcommand(tmp_path, capsys):
    mine = {"vulns": [{"key": [["f", "a.c", 1], ["g", "a.c", 2], ["h", "a.c", 3]]}]}
    theirs = {"vulns": [{"key": [["x", "b.c", 9], ["y", "b.c", 8], ["z", "b.c", 7]]}]}
    (tmp_path / "mine.json").write_text(json.dumps(mine))
    (tmp_path / "theirs.json").write_text(json.dumps(theirs))
    out_file = tmp_path / "diff.json"
    code, _ = run_cli(capsys, "diff", "--mine", str(tmp_path / "mine.json"),
                      "--theirs", str(tmp_path / "theirs.json"), "-o", str(out_file))
    assert code == 0
    diff = json.loads(out_file.read_text())
    assert len(diff["exclusive_mine"]) == 1 and diff["shared"] == 0


def test_triage_subcommand(tmp_path, capsys):
    reports_dir = tmp_path / "artifacts" / "cmd_000"
    reports_dir.mkdir(parents=True)
    (reports_dir / "crash_0000.report").write_text(
        "==1==ERROR: AddressSanitizer: SEGV\n"
        "    #0 0x1 in f /a.c:1\n    #1 0x2 in g /a.c:2\n    #2 0x3 in h /a.c:3\n")
    out_file = tmp_path / "index.json"
    code, _ = run_cli(capsys, "triage", "--reports", str(tmp_path / "artifacts"),
                      "-o", str(out_file))
    assert code == 0
    index = json.loads(out_file.read_text())
    assert len(index["vulns"]) == 1
