"""Command-line client for the pipeline service.

Every subcommand talks to the HTTP API: against a remote server when
--server is given, otherwise against an in-process instance of the app.
`prophet serve` starts the service itself.
"""

import argparse
import json
import sys
import time
from pathlib import Path


def make_client(server: str | None):
    if server:
        import httpx
        return httpx.Client(base_url=server.rstrip("/"), timeout=600.0)
    from fastapi.testclient import TestClient
    from .service.app import app
    return TestClient(app)


def gateway_ref(args) -> dict:
    if getattr(args, "replay", None):
        return {"mode": "replay", "cassette": args.replay}
    if getattr(args, "record", None):
        return {"mode": "record", "cassette": args.record,
                "provider_url": args.provider_url, "model": args.model}
    return {"mode": "passthrough", "provider_url": args.provider_url,
            "model": args.model}


def add_gateway_args(parser):
    parser.add_argument("--replay", metavar="CASSETTE",
                        help="replay recorded completions from this cassette")
    parser.add_argument("--record", metavar="CASSETTE",
                        help="record completions into this cassette")
    parser.add_argument("--provider-url", default=None,
                        help="OpenAI-compatible endpoint for live calls")
    parser.add_argument("--model", default=None)


def emit(payload, out: str | None):
    text = json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def die(resp) -> None:
    sys.stderr.write(f"error {resp.status_code}: {resp.text}\n")
    raise SystemExit(1)


def ok(resp):
    if resp.status_code != 200:
        die(resp)
    return resp.json()


def cmd_serve(args):
    import uvicorn
    uvicorn.run("prophet.service.app:app", host=args.host, port=args.port)


def cmd_parse(args):
    if args.doc == "-":
        body = {"text": sys.stdin.read()}
    else:
        body = {"path": str(Path(args.doc).resolve())}
    with make_client(args.server) as client:
        payload = ok(client.post("/parse", json=body))
    emit(payload["doc"], args.out)


def cmd_render(args):
    text = sys.stdin.read() if args.file == "-" else Path(args.file).read_text(
        encoding="utf-8", errors="replace")
    with make_client(args.server) as client:
        payload = ok(client.post("/render", json={"text": text}))
    sys.stdout.write(payload["text"])


def cmd_constraints(args):
    doc = json.loads(Path(args.doc_json).read_text(encoding="utf-8"))
    body = {
        "doc": doc,
        "gateway": gateway_ref(args),
        "options": {
            "evaluation_count": args.evaluation_count,
            "vote_threshold": args.vote_threshold,
            "split_pairwise": args.split_pairwise,
            "no_selfcheck": args.no_selfcheck,
        },
    }
    with make_client(args.server) as client:
        payload = ok(client.post("/constraints", json=body))
    emit(payload["constraints"], args.out)


def cmd_predict(args):
    body = {
        "doc": json.loads(Path(args.doc_json).read_text(encoding="utf-8")),
        "constraints": json.loads(Path(args.constraints).read_text(encoding="utf-8")),
        "gateway": gateway_ref(args),
        "fewshot": not args.no_fewshot,
        "corpus_path": args.corpus,
        "cot_dir": args.cot_dir,
    }
    with make_client(args.server) as client:
        payload = ok(client.post("/predict", json=body))
    emit(payload["combinations"], args.out)


def cmd_assemble(args):
    combos = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    if not 0 <= args.index < len(combos):
        sys.stderr.write(f"no combination at index {args.index}\n")
        raise SystemExit(1)
    body = {
        "doc": json.loads(Path(args.doc_json).read_text(encoding="utf-8")),
        "combination": combos[args.index],
        "combination_ref": f"combo-{args.index:04d}",
        "gateway": gateway_ref(args),
    }
    with make_client(args.server) as client:
        payload = ok(client.post("/assemble", json=body))
    emit(payload["drafts"], args.out)


def cmd_triage(args):
    reports = []
    for path in sorted(Path(args.reports).glob("**/*.report")):
        reports.append({
            "command_ref": path.parent.name,
            "input_path": str(path.with_suffix(".input")),
            "text": path.read_text(encoding="utf-8", errors="replace"),
        })
    with make_client(args.server) as client:
        payload = ok(client.post("/triage", json={"reports": reports}))
    emit(payload["index"], args.out)


def cmd_diff(args):
    from .triage import TriageIndex, UniqueVulnerability, diff_indexes

    def load(path):
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        vulns = [
            UniqueVulnerability(key=tuple(tuple(f) for f in v["key"]),
                                representative=None)
            for v in data["vulns"]
        ]
        return TriageIndex(vulns, [])

    emit(diff_indexes(load(args.mine), load(args.theirs)), args.out)


def cmd_knowledge(args):
    body = {"cot_dir": args.cot_dir, "gateway": gateway_ref(args)}
    with make_client(args.server) as client:
        payload = ok(client.post("/knowledge", json=body))
    sys.stdout.write(payload["text"] + "\n")


def cmd_eval_constraints(args):
    body = {
        "constraints": json.loads(Path(args.constraints).read_text(encoding="utf-8")),
        "annotation_path": args.annotations,
    }
    with make_client(args.server) as client:
        payload = ok(client.post("/eval-constraints", json=body))
    emit(payload, args.out)


def cmd_run(args):
    body = {
        "doc_path": str(Path(args.doc).resolve()),
        "out_dir": str(Path(args.out_dir).resolve()),
        "gateway": gateway_ref(args),
        "options": {
            "no_selfcheck": args.no_selfcheck,
            "no_fewshot": args.no_fewshot,
            "no_values": args.no_values,
            "no_seeds": args.no_seeds,
            "split_pairwise": args.split_pairwise,
            "default_values_path": args.default_values,
            "seed_dir": args.seed_dir,
        },
    }
    if args.target:
        body["campaign"] = {
            "target": args.target,
            "fuzzer": args.fuzzer,
            "duration_s": args.duration,
            "repetitions": args.reps,
            "slots": args.slots,
            "driver": args.driver,
            "cmin": None if args.no_cmin else args.cmin,
            "showmap": args.showmap,
            "shim": args.shim,
            "triage_target": args.triage_target,
            "reports_dir": args.reports_dir,
        }
    with make_client(args.server) as client:
        run_id = ok(client.post("/runs", json=body))["run_id"]
        sys.stderr.write(f"run {run_id} started\n")
        while True:
            status = ok(client.get(f"/runs/{run_id}"))
            if status["state"] in ("done", "failed"):
                break
            time.sleep(args.poll)
    emit(status, args.out)
    if status["state"] == "failed":
        raise SystemExit(1)
    campaign = status.get("campaign") or {}
    if args.target and campaign.get("command_count") == 0:
        raise SystemExit(2)  # nothing launched: distinct from success


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="prophet",
        description="Predict high-risk option combinations from manpages and fuzz them.",
    )
    parser.add_argument("--server", default=None,
                        help="service URL (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8712)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("parse", help="parse a manpage to ProgramDoc JSON")
    p.add_argument("--doc", required=True, help="manpage path, or - for stdin")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("render", help="render Groff text to plain text")
    p.add_argument("file", help="input file or - for stdin")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("constraints", help="extract and self-check constraints")
    p.add_argument("--doc-json", required=True)
    p.add_argument("--no-selfcheck", action="store_true")
    p.add_argument("--split-pairwise", action="store_true")
    p.add_argument("--evaluation-count", type=int, default=9)
    p.add_argument("--vote-threshold", type=int, default=5)
    p.add_argument("-o", "--out")
    add_gateway_args(p)
    p.set_defaults(func=cmd_constraints)

    p = sub.add_parser("predict", help="predict high-risk option combinations")
    p.add_argument("--doc-json", required=True)
    p.add_argument("--constraints", required=True)
    p.add_argument("--no-fewshot", action="store_true")
    p.add_argument("--corpus", default=None)
    p.add_argument("--cot-dir", default=None)
    p.add_argument("-o", "--out")
    add_gateway_args(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("assemble", help="assemble drafts for one combination")
    p.add_argument("--doc-json", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("-o", "--out")
    add_gateway_args(p)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("run", help="full pipeline, optionally through fuzzing")
    p.add_argument("--doc", required=True)
    p.add_argument("--out-dir", default="prophet_run")
    p.add_argument("--target", default=None, help="instrumented target binary")
    p.add_argument("--fuzzer", default=None, help="fuzzer binary path")
    p.add_argument("--driver", default="optionaware", choices=["optionaware", "plain"])
    p.add_argument("--duration", type=float, default=3600.0)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--slots", type=int, default=1)
    p.add_argument("--cmin", default=None, help="corpus minimizer binary")
    p.add_argument("--no-cmin", action="store_true")
    p.add_argument("--showmap", default=None, help="coverage map tool")
    p.add_argument("--shim", default=None, help="sandbox shim for file scripts")
    p.add_argument("--reports-dir", default=None,
                   help="recorded ExecutionReports in place of the shim")
    p.add_argument("--triage-target", default=None)
    p.add_argument("--no-fewshot", action="store_true")
    p.add_argument("--no-selfcheck", action="store_true")
    p.add_argument("--no-values", action="store_true")
    p.add_argument("--no-seeds", action="store_true")
    p.add_argument("--split-pairwise", action="store_true")
    p.add_argument("--default-values", default=None)
    p.add_argument("--seed-dir", default=None)
    p.add_argument("--poll", type=float, default=1.0)
    p.add_argument("-o", "--out")
    add_gateway_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("triage", help="triage crash reports into a vuln index")
    p.add_argument("--reports", required=True, help="directory of .report files")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("diff", help="exclusive vulnerabilities between two indexes")
    p.add_argument("--mine", required=True)
    p.add_argument("--theirs", required=True)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("knowledge", help="summarize prediction knowledge from CoT logs")
    p.add_argument("--cot-dir", required=True)
    add_gateway_args(p)
    p.set_defaults(func=cmd_knowledge)

    p = sub.add_parser("eval-constraints",
                       help="precision/recall against a human annotation file")
    p.add_argument("--constraints", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_eval_constraints)

    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
