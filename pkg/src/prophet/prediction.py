"""High-risk option combination prediction.

A six-step chain-of-thought prompt, optionally preceded by worked analysis
examples generated once from a shipped corpus of historical vulnerable
combinations, yields n sampled predictions whose union is filtered against
the validated constraints.
"""

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import jsonio, prompts
from .constraints import CONFLICT, DEPENDENCY
from .docparse import ProgramDoc
from .errors import EmptyPrediction, UnparseableOutput
from .gateway import LlmGateway, StageTag, make_request, parse_structured

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RiskCombination:
    options: tuple[str, ...]  # sorted, includes facilitators
    facilitators: tuple[str, ...] = ()
    rationale: str = ""
    source_sample: int = 0

    def __post_init__(self):
        if len(set(self.options)) < 2:
            raise ValueError("a combination needs at least two options")
        if not set(self.facilitators) <= set(self.options):
            raise ValueError("facilitators must be a subset of options")

    @property
    def key(self) -> frozenset:
        return frozenset(self.options)

    def to_dict(self) -> dict:
        return {
            "options": list(self.options),
            "facilitators": list(self.facilitators),
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, d: dict, source_sample: int = 0) -> "RiskCombination":
        return cls(
            options=tuple(sorted(set(d["options"]) | set(d.get("facilitators", [])))),
            facilitators=tuple(sorted(set(d.get("facilitators", [])))),
            rationale=str(d.get("rationale", "")),
            source_sample=source_sample,
        )


@dataclass(frozen=True)
class AnalysisExample:
    program_name: str
    doc_excerpt: str
    historical_combinations: tuple[tuple[str, ...], ...]
    analysis_text: str
    final_json: str

    def to_dict(self) -> dict:
        return {
            "program_name": self.program_name,
            "doc_excerpt": self.doc_excerpt,
            "historical_combinations": [list(c) for c in self.historical_combinations],
            "analysis_text": self.analysis_text,
            "final_json": self.final_json,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisExample":
        return cls(
            program_name=d["program_name"],
            doc_excerpt=d["doc_excerpt"],
            historical_combinations=tuple(tuple(c) for c in d["historical_combinations"]),
            analysis_text=d["analysis_text"],
            final_json=d["final_json"],
        )


@dataclass(frozen=True)
class HistoricalEntry:
    program: str
    doc_ref: str  # manpage file name under the data directory, or a path
    combinations: tuple[tuple[str, ...], ...]


def load_historical_corpus(path=None) -> list[HistoricalEntry]:
    """Load the shipped historical corpus (29 combinations over 8 programs)."""
    if path is None:
        payload = jsonio.loads(
            resources.files("prophet.data").joinpath("historical_corpus.json").read_text()
        )
    else:
        payload = jsonio.load(path)
    return [
        HistoricalEntry(
            program=e["program"],
            doc_ref=e["doc_ref"],
            combinations=tuple(tuple(c) for c in e["combinations"]),
        )
        for e in payload
    ]


def resolve_doc_ref(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    bundled = resources.files("prophet.data").joinpath("manpages").joinpath(ref)
    return Path(str(bundled))


def save_corpus(examples, path) -> None:
    jsonio.dump([e.to_dict() for e in examples], path)


def load_corpus(path=None) -> list[AnalysisExample]:
    if path is None:
        payload = jsonio.loads(
            resources.files("prophet.data").joinpath("fewshot_corpus.json").read_text()
        )
    else:
        payload = jsonio.load(path)
    return [AnalysisExample.from_dict(d) for d in payload]


def constraint_text(constraints) -> str:
    """Canonical rendering: sorted by kind and options, so the prompt is
    stable no matter which path produced the constraint list."""
    lines = []
    for vc in sorted(constraints, key=lambda c: (c.kind, c.options)):
        opts = vc.options
        if vc.kind == CONFLICT:
            lines.append(f"conflict: {' '.join(opts)} cannot be used together")
        else:
            lines.append(f"dependency: {opts[0]} requires {' '.join(opts[1:])}")
    return "\n".join(lines)


class RiskPredictor:
    def __init__(self, gateway: LlmGateway, prediction_samples: int = 10):
        self.gateway = gateway
        self.prediction_samples = prediction_samples

    # --- few-shot corpus generation (one-time) ---

    def build_example(self, doc: ProgramDoc, constraints, historical) -> AnalysisExample:
        prompt = prompts.fewshot_example_prompt(
            doc, constraint_text(constraints), [list(c) for c in historical]
        )
        req = make_request(StageTag.FEWSHOT, [
            ("system", prompts.SYSTEM_ANALYST),
            ("user", prompt),
        ], n_samples=1)
        completion = self.gateway.complete(req)[0]
        payload = parse_structured(completion.text, StageTag.FEWSHOT)  # must parse
        return AnalysisExample(
            program_name=doc.program_name,
            doc_excerpt=_doc_excerpt(doc),
            historical_combinations=tuple(tuple(c) for c in historical),
            analysis_text=completion.text,
            final_json=jsonio.dumps({"combinations": payload}).strip(),
        )

    def build_fewshot_corpus(self, entries, doc_for, constraints_for) -> list[AnalysisExample]:
        """Generate one analysis example per historical program.

        `doc_for` and `constraints_for` map a HistoricalEntry to its parsed
        doc and validated constraints. Programs whose generation output
        cannot be parsed are omitted with a warning.
        """
        examples = []
        for entry in entries:
            doc = doc_for(entry)
            try:
                examples.append(
                    self.build_example(doc, constraints_for(entry), entry.combinations)
                )
            except UnparseableOutput as exc:
                log.warning("few-shot example for %s omitted: %s", entry.program, exc)
        return examples

    # --- prediction ---

    def predict(self, doc: ProgramDoc, constraints, corpus=None, *,
                cot_dir=None, augment_dependencies=True) -> list[RiskCombination]:
        """Union of n sampled predictions, filtered against constraints.

        Every sample's full chain-of-thought text is persisted to cot_dir
        (one file per sample) for the knowledge-summarization stage.
        """
        messages: list[tuple[str, str]] = [("system", prompts.SYSTEM_ANALYST)]
        for example in corpus or []:
            messages.append(("user", prompts.fewshot_example_prompt(
                _excerpt_doc(example), "",
                [list(c) for c in example.historical_combinations])))
            messages.append(("assistant", example.analysis_text))
        messages.append(("user", prompts.predict_prompt(doc, constraint_text(constraints))))

        req = make_request(StageTag.PREDICT, messages, n_samples=self.prediction_samples)
        completions = self.gateway.complete(req)

        if cot_dir is not None:
            cot_dir = Path(cot_dir)
            cot_dir.mkdir(parents=True, exist_ok=True)
            for i, completion in enumerate(completions):
                name = f"{doc.program_name or 'program'}__sample_{i:02d}.txt"
                (cot_dir / name).write_text(completion.text, encoding="utf-8")

        known = doc.option_keys()
        raw: list[RiskCombination] = []
        for i, completion in enumerate(completions):
            try:
                payload = parse_structured(completion.text, StageTag.PREDICT)
            except UnparseableOutput:
                log.warning("prediction sample %d unparseable; skipped", i)
                continue
            for item in payload:
                try:
                    combo = RiskCombination.from_dict(item, source_sample=i)
                except (ValueError, KeyError, TypeError):
                    continue
                unknown = set(combo.options) - known
                if unknown:
                    log.warning("dropping combination with unknown keys: %s", sorted(unknown))
                    continue
                raw.append(combo)

        filtered = filter_invalid(raw, constraints, known,
                                  augment_dependencies=augment_dependencies)
        if not filtered:
            raise EmptyPrediction(f"no valid combination predicted for {doc.program_name}")
        return filtered


def filter_invalid(combos, constraints, known_keys=frozenset(), *,
                   augment_dependencies=True) -> list[RiskCombination]:
    """Drop conflict violations, satisfy dependencies, dedupe option sets.

    A conflict among options G is violated when two or more members of G
    appear together. Dependencies are repaired by adding the missing
    required options when the document defines them (configurable),
    otherwise the combination is dropped. Output preserves first-seen
    order, so adding extra input samples never removes an earlier result.
    """
    conflicts = [set(c.options) for c in constraints if c.kind == CONFLICT]
    dependencies = [(c.options[0], set(c.options[1:]))
                    for c in constraints if c.kind == DEPENDENCY]

    def violates_conflict(options: set) -> bool:
        return any(len(options & group) >= 2 for group in conflicts)

    out: list[RiskCombination] = []
    seen: dict[frozenset, int] = {}
    for combo in combos:
        options = set(combo.options)
        ok = True
        for _ in range(20):  # augmentation closure; deps can cascade
            missing: set[str] = set()
            for subject, objects in dependencies:
                if subject in options:
                    missing |= objects - options
            if not missing:
                break
            if not augment_dependencies or (known_keys and not missing <= set(known_keys)):
                ok = False
                break
            options |= missing
        else:
            ok = False
        if not ok or violates_conflict(options):
            continue
        merged = RiskCombination(
            options=tuple(sorted(options)),
            facilitators=combo.facilitators,
            rationale=combo.rationale,
            source_sample=combo.source_sample,
        )
        if merged.key in seen:
            idx = seen[merged.key]
            prev = out[idx]
            rationale = prev.rationale
            if merged.rationale and merged.rationale not in rationale:
                rationale = (rationale + " | " + merged.rationale).strip(" |")
            out[idx] = RiskCombination(prev.options,
                                       tuple(sorted(set(prev.facilitators)
                                                    | set(merged.facilitators))),
                                       rationale, prev.source_sample)
        else:
            seen[merged.key] = len(out)
            out.append(merged)
    return out


# --- knowledge summarization (two-stage prompt chain) ---

_STEP4 = re.compile(r"step\s*4\b(.*?)(?=step\s*5\b|$)", re.IGNORECASE | re.DOTALL)


def extract_step4(cot_text: str) -> str:
    m = _STEP4.search(cot_text)
    return m.group(1).strip() if m else cot_text.strip()


def summarize_knowledge(gateway: LlmGateway, cot_dir) -> dict:
    """Summarize per-program risk categories, then synthesize and rank.

    Returns {"ranked": [...], "text": rendered list}; when the synthesis
    output cannot be parsed, "ranked" is empty and "text" carries the raw
    synthesis reply.
    """
    cot_dir = Path(cot_dir)
    logs: dict[str, list[str]] = {}
    for path in sorted(cot_dir.glob("*.txt")):
        program = path.name.split("__", 1)[0]
        logs.setdefault(program, []).append(extract_step4(path.read_text(encoding="utf-8")))
    if not logs:
        raise FileNotFoundError(f"no CoT logs found under {cot_dir}")

    per_program: dict[str, str] = {}
    for program, texts in sorted(logs.items()):
        req = make_request(StageTag.SUMMARIZE, [
            ("system", prompts.SYSTEM_ANALYST),
            ("user", prompts.summarize_program_prompt(program, texts)),
        ])
        per_program[program] = gateway.complete(req)[0].text

    req = make_request(StageTag.SUMMARIZE, [
        ("system", prompts.SYSTEM_ANALYST),
        ("user", prompts.synthesize_knowledge_prompt(per_program)),
    ])
    synthesis = gateway.complete(req)[0].text
    try:
        ranking = parse_structured(synthesis, StageTag.SUMMARIZE)
    except UnparseableOutput:
        return {"ranked": [], "text": synthesis, "per_program": per_program}

    lines = []
    ranked = []
    for i, item in enumerate(ranking, 1):
        if isinstance(item, dict):
            category = str(item.get("category", "")).strip()
            description = str(item.get("description", "")).strip()
        else:
            category, description = str(item), ""
        ranked.append({"category": category, "description": description})
        lines.append(f"{i}. {category}." + (f" {description}" if description else ""))
    return {"ranked": ranked, "text": "\n".join(lines), "per_program": per_program}


def _doc_excerpt(doc: ProgramDoc, limit: int = 2000) -> str:
    text = f"{doc.program_name}: {doc.description}\n" + prompts.format_options(doc.options)
    return text[:limit]


def _excerpt_doc(example: AnalysisExample) -> ProgramDoc:
    """Rehydrate a minimal doc so the few-shot prompt renders the excerpt."""
    return ProgramDoc(
        program_name=example.program_name,
        description=example.doc_excerpt,
        synopsis="",
        options=(),
    )
