"""End-to-end pipeline orchestration.

Stage outputs are plain JSON files under a run directory, written through
the canonical serializer so a replayed run is byte-identical:

    run/
      doc.json                  parsed manpage
      constraints.json          validated constraints (+ rejected, for audit)
      predictions.json          post-filter combinations
      cot_logs/                 one file per prediction sample
      drafts/<id>/command.json  assembled commands
      drafts/<id>/genfiles.py   file-generation script
      report.json               stage statistics and LLM costs
      campaign/                 fuzzing outputs (separate phase)

The ablation switches disable a stage's inputs, not its logic: no_selfcheck
passes extraction output through unchecked, no_fewshot predicts zero-shot,
no_values swaps generated option values for defaults, no_seeds takes the
corpus from a provided seed directory.
"""

import logging
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from . import jsonio
from .assembly import AssemblerConfig, CommandAssembler, DraftCommand
from .campaign import (
    CampaignConfig,
    Excluded,
    ExecutionReport,
    build_corpus,
    launch_campaign,
    mark_input,
    reconcile_files,
)
from .constraints import (
    ConstraintEngine,
    ConstraintEngineConfig,
    SelfCheckVerdict,
    ValidatedConstraint,
    constraints_from_doc,
    constraints_to_doc,
)
from .docparse import ProgramDoc, parse_manpage_file
from .errors import AssemblyFailed, EmptyPrediction, ProphetError, ScriptRejected
from .gateway import LlmGateway
from .prediction import RiskPredictor, load_corpus
from .triage import compute_metrics, make_report, render_markdown, triage_crashes

log = logging.getLogger(__name__)


@dataclass
class PipelineOptions:
    no_selfcheck: bool = False
    no_fewshot: bool = False
    no_values: bool = False
    no_seeds: bool = False
    split_pairwise: bool = False
    prefer_uncommon_values: bool = False
    evaluation_count: int = 9
    vote_threshold: int = 5
    extraction_samples: int = 10
    prediction_samples: int = 10
    fewshot_corpus_path: str | None = None  # None = shipped corpus
    default_values_path: str | None = None  # used by no_values
    seed_dir: str | None = None  # used by no_seeds


@dataclass
class StageArtifacts:
    outdir: Path
    doc: ProgramDoc
    constraints: list
    predictions: list
    drafts: list  # (draft_id, DraftCommand) in deterministic order
    scripts: dict  # draft_id -> ScriptArtifact
    exclusions: dict = field(default_factory=dict)


def draft_id(combo_index: int, draft_index: int) -> str:
    return f"combo-{combo_index:04d}_draft-{draft_index:02d}"


def combo_ref(combo_index: int) -> str:
    return f"combo-{combo_index:04d}"


def run_stages(doc_path, outdir, gateway: LlmGateway,
               options: PipelineOptions | None = None) -> StageArtifacts:
    """Parse, extract, validate, predict, assemble, and generate scripts."""
    options = options or PipelineOptions()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    exclusions: dict[str, int] = {}

    doc = parse_manpage_file(doc_path)
    gateway.ledger.set_program(doc.program_name)

    engine = ConstraintEngine(gateway, ConstraintEngineConfig(
        extraction_samples=options.extraction_samples,
        evaluation_count=options.evaluation_count,
        vote_threshold=options.vote_threshold,
        split_pairwise=options.split_pairwise,
    ))
    doc = engine.split_doc(doc)
    doc_dict = doc.to_dict()
    doc_dict["source_path"] = Path(doc_path).name
    jsonio.dump(doc_dict, outdir / "doc.json")

    candidates = engine.extract_constraints(doc)
    if options.no_selfcheck:
        vacuous = SelfCheckVerdict((), threshold=0)
        validated = [ValidatedConstraint(c, vacuous) for c in candidates]
        rejections: list[dict] = []
    else:
        validated, rejections = engine.validate_all(candidates, doc)
    jsonio.dump(constraints_to_doc(validated, rejections), outdir / "constraints.json")

    corpus = None
    if not options.no_fewshot:
        corpus = load_corpus(options.fewshot_corpus_path)
    predictor = RiskPredictor(gateway, prediction_samples=options.prediction_samples)
    try:
        predictions = predictor.predict(
            doc, validated, corpus, cot_dir=outdir / "cot_logs")
    except EmptyPrediction:
        log.warning("prediction produced no valid combinations")
        predictions = []
    jsonio.dump([p.to_dict() for p in predictions], outdir / "predictions.json")

    default_values = {}
    if options.no_values and options.default_values_path:
        default_values = jsonio.load(options.default_values_path)

    assembler = CommandAssembler(gateway, AssemblerConfig(
        prefer_uncommon_values=options.prefer_uncommon_values))
    drafts: list[tuple[str, DraftCommand]] = []
    scripts: dict = {}
    for ci, combo in enumerate(predictions):
        try:
            combo_drafts = assembler.assemble(doc, combo, combo_ref(ci))
        except AssemblyFailed:
            exclusions["assembly_failed"] = exclusions.get("assembly_failed", 0) + 1
            continue
        for di, draft in enumerate(combo_drafts):
            if options.no_values:
                draft = _apply_default_values(draft, default_values)
            did = draft_id(ci, di)
            ddir = outdir / "drafts" / did
            ddir.mkdir(parents=True, exist_ok=True)
            jsonio.dump(draft.to_dict(), ddir / "command.json")
            drafts.append((did, draft))
            if draft.placeholders:
                try:
                    script = assembler.generate_filegen_script(draft)
                except ScriptRejected:
                    exclusions["script_rejected"] = exclusions.get("script_rejected", 0) + 1
                    continue
                (ddir / "genfiles.py").write_text(script.script_text + "\n",
                                                  encoding="utf-8")
                jsonio.dump(script.to_dict(), ddir / "script.json")
                scripts[did] = script

    artifacts = StageArtifacts(outdir, doc, validated, predictions, drafts,
                               scripts, exclusions)
    _write_run_report(artifacts, gateway)
    return artifacts


def _apply_default_values(draft: DraftCommand, defaults: dict) -> DraftCommand:
    """no_values ablation: swap generated option values for dataset defaults."""
    argv = list(draft.argv_template)
    values = dict(draft.assigned_values)
    for opt, default in defaults.items():
        for i, token in enumerate(argv):
            if token == opt and i + 1 < len(argv) and not argv[i + 1].startswith("-"):
                argv[i + 1] = str(default)
                values[opt] = str(default)
    return DraftCommand(draft.combination_ref, tuple(argv), values,
                        draft.placeholders, draft.repairs + ("default values applied",))


def _write_run_report(artifacts: StageArtifacts, gateway: LlmGateway) -> None:
    report = {
        "program": artifacts.doc.program_name,
        "options_parsed": len(artifacts.doc.options),
        "constraints_validated": len(artifacts.constraints),
        "combinations_predicted": len(artifacts.predictions),
        "drafts_assembled": len(artifacts.drafts),
        "scripts_generated": len(artifacts.scripts),
        "exclusions": artifacts.exclusions,
        "llm_costs": gateway.ledger.report(),
    }
    jsonio.dump(report, artifacts.outdir / "report.json")


def load_stage_artifacts(outdir) -> StageArtifacts:
    """Rehydrate a run directory written by run_stages (scripts as text)."""
    outdir = Path(outdir)
    doc = ProgramDoc.from_json((outdir / "doc.json").read_text(encoding="utf-8"))
    constraints = constraints_from_doc(jsonio.load(outdir / "constraints.json"))
    from .prediction import RiskCombination
    predictions = [RiskCombination.from_dict(d)
                   for d in jsonio.load(outdir / "predictions.json")]
    drafts = []
    scripts = {}
    drafts_dir = outdir / "drafts"
    if drafts_dir.is_dir():
        for ddir in sorted(drafts_dir.iterdir()):
            if not (ddir / "command.json").exists():
                continue
            draft = DraftCommand.from_dict(jsonio.load(ddir / "command.json"))
            drafts.append((ddir.name, draft))
            genfile = ddir / "genfiles.py"
            if genfile.exists():
                scripts[ddir.name] = genfile.read_text(encoding="utf-8")
    return StageArtifacts(outdir, doc, constraints, predictions, drafts, scripts)


# --- file-generation script execution (delegated to the sandbox shim) ---


class ShimRunner:
    """Executes scripts via the external sandbox shim binary."""

    def __init__(self, shim_path: str, timeout_s: float = 60.0,
                 mem_bytes: int = 1 << 30, disk_bytes: int = 64 << 20):
        self.shim_path = shim_path
        self.timeout_s = timeout_s
        self.mem_bytes = mem_bytes
        self.disk_bytes = disk_bytes

    def __call__(self, script_text: str, workdir: Path) -> ExecutionReport:
        workdir.mkdir(parents=True, exist_ok=True)
        script_file = workdir.parent / (workdir.name + ".gen.py")
        script_file.write_text(script_text, encoding="utf-8")
        argv = [self.shim_path, "--script", str(script_file), "--workdir", str(workdir),
                "--timeout", str(self.timeout_s), "--mem-bytes", str(self.mem_bytes),
                "--disk-bytes", str(self.disk_bytes)]
        proc = subprocess.run(argv, capture_output=True,
                              timeout=self.timeout_s + 30)
        if proc.returncode != 0:
            raise ProphetError(f"sandbox shim failed: {proc.stderr.decode()[:300]}")
        return ExecutionReport.from_json(proc.stdout.decode())


class FixtureRunner:
    """Replays recorded ExecutionReports (keyed by draft id) and materializes
    the files they claim, so campaigns can be tested without the shim."""

    def __init__(self, reports_dir, contents: dict | None = None):
        self.reports_dir = Path(reports_dir)
        self.contents = contents or {}

    def __call__(self, script_text: str, workdir: Path, draft_id: str = "") -> ExecutionReport:
        report_path = self.reports_dir / f"{draft_id}.json"
        report = ExecutionReport.from_json(report_path.read_text(encoding="utf-8"))
        workdir.mkdir(parents=True, exist_ok=True)
        for name, size in report.produced_files:
            data = self.contents.get(name, b"\x00" * size)
            (workdir / name).write_bytes(data)
        return report


def run_filegen(artifacts: StageArtifacts, runner) -> dict:
    """Run every draft's script; returns draft_id -> (report, workdir).

    Workdirs live under the run directory unless PROPHET_SANDBOX_ROOT
    points somewhere else (one subdirectory per draft either way).
    """
    results: dict[str, tuple[ExecutionReport, Path]] = {}
    root = os.environ.get("PROPHET_SANDBOX_ROOT")
    gen_root = Path(root) / artifacts.doc.program_name if root \
        else artifacts.outdir / "generated"
    for did, _draft in artifacts.drafts:
        script = artifacts.scripts.get(did)
        if script is None:
            continue
        script_text = script if isinstance(script, str) else script.script_text
        workdir = gen_root / did
        try:
            if isinstance(runner, FixtureRunner):
                report = runner(script_text, workdir, draft_id=did)
            else:
                report = runner(script_text, workdir)
        except (ProphetError, OSError, subprocess.TimeoutExpired, FileNotFoundError) as exc:
            log.warning("file generation failed for %s: %s", did, exc)
            continue
        results[did] = (report, workdir)
    return results


def finalize_commands(artifacts: StageArtifacts, filegen_results) -> tuple[list, dict]:
    """Reconcile produced files and mark fuzz inputs; returns (commands,
    exclusion tally). Every draft ends as launched-ready or excluded."""
    commands = []
    exclusions: dict[str, int] = dict(artifacts.exclusions)
    for did, draft in artifacts.drafts:
        if not draft.placeholders:
            exclusions["no placeholders"] = exclusions.get("no placeholders", 0) + 1
            continue
        if did not in filegen_results:
            exclusions["script not run"] = exclusions.get("script not run", 0) + 1
            continue
        report, workdir = filegen_results[did]
        resolved = reconcile_files(draft, report)
        if isinstance(resolved, Excluded):
            exclusions[resolved.reason] = exclusions.get(resolved.reason, 0) + 1
            continue
        command = mark_input(draft, resolved, workdir)
        if isinstance(command, Excluded):
            exclusions[command.reason] = exclusions.get(command.reason, 0) + 1
            continue
        command = _rebind_origin(command, did)
        commands.append(command)
    return commands, exclusions


def _rebind_origin(command, did):
    from .campaign import ExecutableCommand
    return ExecutableCommand(command.argv, command.seed_file, command.aux_files,
                             did, command.combination_ref)


def run_campaign_phase(artifacts: StageArtifacts, commands, cfg: CampaignConfig,
                       options: PipelineOptions | None = None,
                       cmin_path=None, event_cb=None) -> dict:
    """Build the corpus, fuzz, triage, and write the final report."""
    options = options or PipelineOptions()
    campaign_dir = Path(cfg.output_root)
    program = artifacts.doc.program_name

    if options.no_seeds and options.seed_dir:
        corpus_dir = Path(options.seed_dir)
        corpus_info = {"mode": "provided", "dir": str(corpus_dir)}
    else:
        corpus = build_corpus(program, commands, campaign_dir,
                              cmin_path=cmin_path, target_path=cfg.target_path)
        corpus_dir = Path(corpus.minimized_dir)
        corpus_info = corpus.to_dict()

    result = launch_campaign(cfg, program, commands, corpus_dir, event_cb=event_cb)

    indexes = []
    for rep in range(cfg.repetitions):
        reports = [
            make_report(c["command_id"], c["input"],
                        Path(c["report"]).read_text(encoding="utf-8", errors="replace"),
                        combination_ref=c["combination_ref"])
            for c in result.crashes if c["rep"] == rep
        ]
        indexes.append(triage_crashes(reports))

    predicted_refs = [combo_ref(i) for i in range(len(artifacts.predictions))]
    coverage_dir = campaign_dir / "coverage" if cfg.showmap_path else None
    metrics = compute_metrics(
        program, indexes, predicted_refs, command_count=len(commands),
        coverage_dir=coverage_dir, costs=None, exclusions=artifacts.exclusions)

    union = triage_crashes([
        make_report(c["command_id"], c["input"],
                    Path(c["report"]).read_text(encoding="utf-8", errors="replace"),
                    combination_ref=c["combination_ref"])
        for c in result.crashes
    ])
    jsonio.dump(union.to_dict(), campaign_dir / "triage.json")
    jsonio.dump(metrics.to_dict(), campaign_dir / "metrics.json")
    (campaign_dir / "report.md").write_text(render_markdown(metrics), encoding="utf-8")
    return {"metrics": metrics.to_dict(), "corpus": corpus_info,
            "campaign": result.to_dict(), "triage": union.to_dict()}
