"""FastAPI service wrapping the pipeline.

Every stage is callable on its own, and full runs (including fuzzing
campaigns, which are long-lived) execute as background jobs that clients
poll. The CLI is a thin client of this app.
"""

import logging
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__, jsonio
from ..assembly import AssemblerConfig, CommandAssembler, DraftCommand
from ..campaign import CampaignConfig, Excluded, ExecutionReport, mark_input, reconcile_files
from ..constraints import (
    ConstraintEngine,
    ConstraintEngineConfig,
    SelfCheckVerdict,
    ValidatedConstraint,
    constraints_from_doc,
    constraints_to_doc,
    evaluate_against_annotations,
)
from ..docparse import ProgramDoc, parse_manpage, parse_manpage_file, render_plain
from ..errors import MissingSection, ProphetError
from ..gateway import (
    Cassette,
    CassetteMode,
    CostLedger,
    GatewayConfig,
    LlmGateway,
    OpenAICompatProvider,
)
from ..pipeline import (
    FixtureRunner,
    PipelineOptions,
    ShimRunner,
    finalize_commands,
    run_campaign_phase,
    run_filegen,
    run_stages,
)
from ..prediction import RiskCombination, RiskPredictor, load_corpus, summarize_knowledge
from ..triage import compute_metrics, make_report, render_markdown, triage_crashes
from . import schemas

log = logging.getLogger(__name__)

app = FastAPI(title="prophet", version=__version__)


def build_gateway(ref: schemas.GatewayRef) -> LlmGateway:
    provider = None
    if ref.provider_url:
        provider = OpenAICompatProvider(ref.provider_url, ref.model or "",
                                        api_key_env=ref.api_key_env)
    cassette = None
    if ref.mode in ("replay", "record"):
        if not ref.cassette:
            raise HTTPException(422, f"{ref.mode} mode needs a cassette path")
        try:
            cassette = Cassette(ref.cassette, CassetteMode(ref.mode))
        except ProphetError as exc:
            raise HTTPException(422, str(exc))
    ledger = CostLedger(ref.prompt_price_per_1k, ref.completion_price_per_1k)
    try:
        return LlmGateway(provider, cassette, ledger,
                          GatewayConfig(budget_cap=ref.budget_cap))
    except ValueError as exc:
        raise HTTPException(422, str(exc))


@app.get("/health", response_model=schemas.HealthOut)
def health():
    return {"status": "ok", "version": __version__}


@app.post("/parse", response_model=schemas.ParseOut)
def parse(body: schemas.ParseIn):
    try:
        if body.path:
            doc = parse_manpage_file(body.path)
        elif body.text is not None:
            doc = parse_manpage(body.text)
        else:
            raise HTTPException(422, "need text or path")
        return {"doc": doc.to_dict(), "warnings": list(doc.warnings)}
    except MissingSection as exc:
        raise HTTPException(422, str(exc))
    except FileNotFoundError as exc:
        raise HTTPException(404, str(exc))


@app.post("/render", response_model=schemas.RenderOut)
def render(body: schemas.RenderIn):
    return {"text": render_plain(body.text)}


@app.post("/constraints", response_model=schemas.ConstraintsOut)
def constraints(body: schemas.ConstraintsIn):
    doc = ProgramDoc.from_dict(body.doc)
    gateway = build_gateway(body.gateway)
    engine = ConstraintEngine(gateway, ConstraintEngineConfig(
        extraction_samples=body.options.extraction_samples,
        evaluation_count=body.options.evaluation_count,
        vote_threshold=body.options.vote_threshold,
        split_pairwise=body.options.split_pairwise,
    ))
    try:
        doc = engine.split_doc(doc)
        candidates = engine.extract_constraints(doc)
        if body.options.no_selfcheck:
            validated = [ValidatedConstraint(c, SelfCheckVerdict((), 0))
                         for c in candidates]
            rejections = []
        else:
            validated, rejections = engine.validate_all(candidates, doc)
    except ProphetError as exc:
        raise HTTPException(502, str(exc))
    return {"constraints": constraints_to_doc(validated, rejections),
            "candidate_count": len(candidates)}


@app.post("/predict", response_model=schemas.PredictOut)
def predict(body: schemas.PredictIn):
    doc = ProgramDoc.from_dict(body.doc)
    gateway = build_gateway(body.gateway)
    validated = constraints_from_doc(body.constraints)
    corpus = load_corpus(body.corpus_path) if body.fewshot else None
    predictor = RiskPredictor(gateway, prediction_samples=body.samples)
    try:
        combos = predictor.predict(doc, validated, corpus, cot_dir=body.cot_dir)
    except ProphetError as exc:
        raise HTTPException(502, str(exc))
    return {"combinations": [c.to_dict() for c in combos]}


@app.post("/assemble", response_model=schemas.AssembleOut)
def assemble(body: schemas.AssembleIn):
    doc = ProgramDoc.from_dict(body.doc)
    gateway = build_gateway(body.gateway)
    assembler = CommandAssembler(gateway, AssemblerConfig(
        prefer_uncommon_values=body.prefer_uncommon_values))
    combo = RiskCombination.from_dict(body.combination)
    try:
        drafts = assembler.assemble(doc, combo, body.combination_ref)
    except ProphetError as exc:
        raise HTTPException(502, str(exc))
    return {"drafts": [d.to_dict() for d in drafts]}


@app.post("/filegen", response_model=schemas.FilegenOut)
def filegen(body: schemas.FilegenIn):
    gateway = build_gateway(body.gateway)
    draft = DraftCommand.from_dict(body.draft)
    try:
        script = CommandAssembler(gateway).generate_filegen_script(draft)
    except (ProphetError, ValueError) as exc:
        raise HTTPException(502, str(exc))
    return {"script": script.to_dict()}


@app.post("/reconcile", response_model=schemas.ReconcileOut)
def reconcile(body: schemas.ReconcileIn):
    draft = DraftCommand.from_dict(body.draft)
    report = ExecutionReport.from_dict(body.report)
    out = reconcile_files(draft, report)
    if isinstance(out, Excluded):
        return {"excluded": out.reason}
    return {"resolved": out}


@app.post("/command", response_model=schemas.MarkInputOut)
def command(body: schemas.MarkInputIn):
    draft = DraftCommand.from_dict(body.draft)
    out = mark_input(draft, body.resolved, body.workdir)
    if isinstance(out, Excluded):
        return {"excluded": out.reason}
    return {"command": out.to_dict()}


@app.post("/triage", response_model=schemas.TriageOut)
def triage(body: schemas.TriageIn):
    reports = [
        make_report(r.command_ref, r.input_path, r.text,
                    combination_ref=r.combination_ref)
        for r in body.reports
    ]
    return {"index": triage_crashes(reports).to_dict()}


@app.post("/metrics", response_model=schemas.MetricsOut)
def metrics(body: schemas.MetricsIn):
    indexes = []
    for group in body.indexes:
        reports = [
            make_report(r.command_ref, r.input_path, r.text,
                        combination_ref=r.combination_ref)
            for r in group.reports
        ]
        indexes.append(triage_crashes(reports))
    result = compute_metrics(body.program, indexes, body.predicted_refs,
                             body.command_count, coverage_dir=body.coverage_dir)
    return {"metrics": result.to_dict(), "markdown": render_markdown(result)}


@app.post("/knowledge", response_model=schemas.KnowledgeOut)
def knowledge(body: schemas.KnowledgeIn):
    gateway = build_gateway(body.gateway)
    try:
        out = summarize_knowledge(gateway, body.cot_dir)
    except FileNotFoundError as exc:
        raise HTTPException(404, str(exc))
    return {"ranked": out["ranked"], "text": out["text"]}


@app.post("/eval-constraints")
def eval_constraints(body: schemas.EvalConstraintsIn):
    validated = constraints_from_doc(body.constraints)
    try:
        return evaluate_against_annotations(validated, body.annotation_path)
    except FileNotFoundError as exc:
        raise HTTPException(404, str(exc))


# --- background runs ---


class RunRegistry:
    def __init__(self):
        self._lock = threading.Lock()
        self._runs: dict[str, dict] = {}

    def create(self) -> str:
        run_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._runs[run_id] = {"run_id": run_id, "state": "queued", "detail": ""}
        return run_id

    def update(self, run_id: str, **fields):
        with self._lock:
            self._runs[run_id].update(fields)

    def get(self, run_id: str) -> dict | None:
        with self._lock:
            run = self._runs.get(run_id)
            return dict(run) if run else None

    def all(self) -> list[dict]:
        with self._lock:
            return [dict(r) for r in self._runs.values()]


runs = RunRegistry()


def _execute_run(run_id: str, body: schemas.RunIn) -> None:
    try:
        runs.update(run_id, state="running")
        gateway = build_gateway(body.gateway)
        options = PipelineOptions(**body.options.model_dump())
        artifacts = run_stages(body.doc_path, body.out_dir, gateway, options)
        stages_summary = jsonio.load(Path(body.out_dir) / "report.json")
        runs.update(run_id, stages=stages_summary)

        campaign_out = None
        if body.campaign is not None:
            settings = body.campaign
            if settings.reports_dir:
                runner = FixtureRunner(settings.reports_dir)
            elif settings.shim:
                runner = ShimRunner(settings.shim)
            else:
                runner = None
            filegen_results = run_filegen(artifacts, runner) if runner else {}
            commands, exclusions = finalize_commands(artifacts, filegen_results)
            artifacts.exclusions = exclusions
            cfg = CampaignConfig(
                fuzzer_path=settings.fuzzer,
                target_path=settings.target,
                duration_s=settings.duration_s,
                repetitions=settings.repetitions,
                slots=settings.slots,
                output_root=str(Path(body.out_dir) / "campaign"),
                driver=settings.driver,
                showmap_path=settings.showmap,
                triage_target_path=settings.triage_target,
            )
            campaign_out = run_campaign_phase(
                artifacts, commands, cfg, options, cmin_path=settings.cmin)
            runs.update(run_id, campaign=campaign_out["metrics"])
        runs.update(run_id, state="done")
    except Exception as exc:  # surfaced via the status endpoint
        log.exception("run %s failed", run_id)
        runs.update(run_id, state="failed", detail=f"{type(exc).__name__}: {exc}")


@app.post("/runs", response_model=schemas.RunOut)
def create_run(body: schemas.RunIn):
    if not Path(body.doc_path).exists():
        raise HTTPException(404, f"doc not found: {body.doc_path}")
    run_id = runs.create()
    thread = threading.Thread(target=_execute_run, args=(run_id, body),
                              name=f"run-{run_id}", daemon=True)
    thread.start()
    return {"run_id": run_id}


@app.get("/runs/{run_id}", response_model=schemas.RunStatusOut)
def run_status(run_id: str):
    run = runs.get(run_id)
    if run is None:
        raise HTTPException(404, "no such run")
    return run


@app.get("/runs")
def list_runs():
    return {"runs": runs.all()}
