"""Pydantic request/response models for the HTTP service.

Domain artifacts (ProgramDoc, constraints, drafts, reports) travel in
their canonical JSON forms, produced and consumed by the dataclasses'
to_dict/from_dict; the models here validate the envelopes around them.
"""

from pydantic import BaseModel, Field


class GatewayRef(BaseModel):
    """How a request wants its model traffic served."""

    mode: str = "replay"  # replay | record | passthrough
    cassette: str | None = None
    provider_url: str | None = None
    model: str | None = None
    api_key_env: str = "PROPHET_API_KEY"
    prompt_price_per_1k: str = "0"
    completion_price_per_1k: str = "0"
    budget_cap: str | None = None


class HealthOut(BaseModel):
    status: str
    version: str


class ParseIn(BaseModel):
    text: str | None = None
    path: str | None = None


class ParseOut(BaseModel):
    doc: dict
    warnings: list[str] = []


class RenderIn(BaseModel):
    text: str


class RenderOut(BaseModel):
    text: str


class ConstraintOptions(BaseModel):
    extraction_samples: int = 10
    evaluation_count: int = 9
    vote_threshold: int = 5
    split_pairwise: bool = False
    no_selfcheck: bool = False


class ConstraintsIn(BaseModel):
    doc: dict
    gateway: GatewayRef
    options: ConstraintOptions = ConstraintOptions()


class ConstraintsOut(BaseModel):
    constraints: dict  # canonical {conflicts: [...], dependencies: [...], rejected: [...]}
    candidate_count: int


class PredictIn(BaseModel):
    doc: dict
    constraints: dict
    gateway: GatewayRef
    fewshot: bool = True
    corpus_path: str | None = None
    samples: int = 10
    cot_dir: str | None = None


class PredictOut(BaseModel):
    combinations: list[dict]


class AssembleIn(BaseModel):
    doc: dict
    combination: dict
    combination_ref: str = ""
    gateway: GatewayRef
    prefer_uncommon_values: bool = False


class AssembleOut(BaseModel):
    drafts: list[dict]


class FilegenIn(BaseModel):
    draft: dict
    gateway: GatewayRef


class FilegenOut(BaseModel):
    script: dict


class ReconcileIn(BaseModel):
    draft: dict
    report: dict


class ReconcileOut(BaseModel):
    resolved: dict | None = None
    excluded: str | None = None


class MarkInputIn(BaseModel):
    draft: dict
    resolved: dict
    workdir: str


class MarkInputOut(BaseModel):
    command: dict | None = None
    excluded: str | None = None


class CrashReportIn(BaseModel):
    command_ref: str
    input_path: str = ""
    text: str
    combination_ref: str = ""


class TriageIn(BaseModel):
    reports: list[CrashReportIn]


class TriageOut(BaseModel):
    index: dict


class MetricsIn(BaseModel):
    program: str
    indexes: list[TriageIn]  # crash reports grouped by repetition
    predicted_refs: list[str]
    command_count: int
    coverage_dir: str | None = None


class MetricsOut(BaseModel):
    metrics: dict
    markdown: str


class KnowledgeIn(BaseModel):
    cot_dir: str
    gateway: GatewayRef


class KnowledgeOut(BaseModel):
    ranked: list[dict]
    text: str


class EvalConstraintsIn(BaseModel):
    constraints: dict
    annotation_path: str


class CampaignSettings(BaseModel):
    target: str
    fuzzer: str
    duration_s: float = Field(gt=0)
    repetitions: int = Field(default=1, ge=1)
    slots: int = Field(default=1, ge=1)
    driver: str = "optionaware"
    cmin: str | None = None
    showmap: str | None = None
    shim: str | None = None
    triage_target: str | None = None
    reports_dir: str | None = None  # recorded ExecutionReports instead of shim


class RunOptions(BaseModel):
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
    fewshot_corpus_path: str | None = None
    default_values_path: str | None = None
    seed_dir: str | None = None


class RunIn(BaseModel):
    doc_path: str
    out_dir: str
    gateway: GatewayRef
    options: RunOptions = RunOptions()
    campaign: CampaignSettings | None = None


class RunOut(BaseModel):
    run_id: str


class RunStatusOut(BaseModel):
    run_id: str
    state: str  # queued | running | done | failed
    detail: str = ""
    stages: dict | None = None
    campaign: dict | None = None
