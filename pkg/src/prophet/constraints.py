"""Constraint extraction and self-check validation.

Candidates come from a single n-sampled extraction request whose results
are unioned; each surviving candidate is then interrogated with a
verification question and a counterexample question over several
independent low-temperature rounds. A round affirms the constraint only
when the verification answer is "yes" and the counterexample answer is
"no"; the constraint is kept when at least `vote_threshold` rounds affirm.
"""

import logging
import re
from dataclasses import dataclass, field

from . import jsonio
from .docparse import OptionEntry, ProgramDoc
from .errors import EmptyExtraction, ProphetError, UnparseableOutput
from .gateway import LlmGateway, StageTag, make_request, parse_structured
from . import prompts

log = logging.getLogger(__name__)

CONFLICT = "conflict"
DEPENDENCY = "dependency"


@dataclass(frozen=True)
class CandidateConstraint:
    kind: str  # conflict | dependency
    subject: str
    objects: tuple[str, ...]
    evidence: str = ""
    sample_count: int = 1

    def __post_init__(self):
        if self.kind not in (CONFLICT, DEPENDENCY):
            raise ValueError(f"bad constraint kind: {self.kind}")
        if not self.objects or self.subject in self.objects:
            raise ValueError("constraint needs a subject and distinct objects")

    @property
    def options(self) -> tuple[str, ...]:
        return (self.subject, *self.objects)

    def identity(self):
        """Dedupe key: conflicts are unordered, dependencies directional."""
        if self.kind == CONFLICT:
            return (self.kind, frozenset(self.options))
        return (self.kind, self.subject, self.objects)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "options": list(self.options),
            "evidence": self.evidence,
            "sample_count": self.sample_count,
        }


def normalized_conflict(options, evidence="", sample_count=1) -> CandidateConstraint:
    """Conflicts are stored with the lexicographically smallest key first."""
    ordered = sorted(set(options))
    return CandidateConstraint(CONFLICT, ordered[0], tuple(ordered[1:]),
                               evidence, sample_count)


@dataclass(frozen=True)
class SelfCheckVerdict:
    rounds: tuple[tuple[str, str], ...]  # normalized (verification, counterexample)
    threshold: int
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def affirm_count(self) -> int:
        return sum(1 for v, c in self.rounds if v == "yes" and c == "no")

    @property
    def valid(self) -> bool:
        return self.affirm_count >= self.threshold

    def to_dict(self) -> dict:
        return {
            "rounds": [list(r) for r in self.rounds],
            "affirm_count": self.affirm_count,
            "threshold": self.threshold,
            "valid": self.valid,
        }


@dataclass(frozen=True)
class ValidatedConstraint:
    constraint: CandidateConstraint
    verdict: SelfCheckVerdict

    def __post_init__(self):
        if not self.verdict.valid:
            raise ValueError("a ValidatedConstraint requires a valid verdict")

    @property
    def kind(self) -> str:
        return self.constraint.kind

    @property
    def options(self) -> tuple[str, ...]:
        return self.constraint.options

    def to_dict(self) -> dict:
        return {"options": list(self.options), "verdict": self.verdict.to_dict(),
                "evidence": self.constraint.evidence,
                "sample_count": self.constraint.sample_count}


def tally_rounds(rounds, threshold: int) -> SelfCheckVerdict:
    """Build the verdict for normalized per-round answer pairs."""
    return SelfCheckVerdict(tuple((v, c) for v, c in rounds), threshold)


def normalize_answer(text) -> str:
    """First standalone yes/no token, lowercased; '' when ambiguous."""
    if not isinstance(text, str):
        return ""
    m = re.search(r"\b(yes|no)\b", text, re.IGNORECASE)
    return m.group(1).lower() if m else ""


def make_bidirectional_questions(c: CandidateConstraint) -> tuple[str, str]:
    """Verification and counterexample questions for one constraint.

    Multi-option constraints are phrased whole, with the object keys joined.
    """
    others = " and ".join(c.objects)
    if c.kind == CONFLICT:
        return (
            f"Must {c.subject} be used without {others}?",
            f"Can {c.subject} be used with {others}?",
        )
    return (
        f"Must {c.subject} be used with {others}?",
        f"Can {c.subject} be used without {others}?",
    )


@dataclass
class ConstraintEngineConfig:
    extraction_samples: int = 10
    evaluation_count: int = 9
    vote_threshold: int = 5
    split_pairwise: bool = False
    concurrency: int = 1  # candidates checked in parallel; rounds stay sequential


class ConstraintEngine:
    def __init__(self, gateway: LlmGateway, config: ConstraintEngineConfig | None = None):
        self.gateway = gateway
        self.config = config or ConstraintEngineConfig()

    # --- option key splitting ---

    def split_option_keys(self, entry: OptionEntry) -> list[OptionEntry]:
        """Ask the model to separate entries with more than two keys.

        Entries with two or fewer keys pass through unchanged. Any response
        that does not exactly partition the original keys falls back to the
        original entry.
        """
        if len(entry.keys) <= 2:
            return [entry]
        req = make_request(StageTag.SPLIT, [
            ("system", prompts.SYSTEM_ANALYST),
            ("user", prompts.split_keys_prompt(entry)),
        ])
        completion = self.gateway.complete(req)[0]
        try:
            groups = parse_structured(completion.text, StageTag.SPLIT)
        except UnparseableOutput:
            log.warning("split: unparseable output for %s; keeping entry whole", entry.keys)
            return [entry]

        seen: list[str] = []
        out: list[OptionEntry] = []
        for group in groups:
            keys = [k for k in group["keys"] if isinstance(k, str)]
            if not keys:
                return [entry]
            seen.extend(keys)
            out.append(OptionEntry(
                keys=tuple(dict.fromkeys(keys)),
                description=str(group.get("description", entry.description)),
                takes_value=entry.takes_value,
            ))
        if sorted(seen) != sorted(entry.keys):
            log.warning("split: group keys %s do not partition %s; keeping entry whole",
                        seen, entry.keys)
            return [entry]
        return out

    def split_doc(self, doc: ProgramDoc) -> ProgramDoc:
        new_entries: list[OptionEntry] = []
        for entry in doc.options:
            new_entries.extend(self.split_option_keys(entry))
        return ProgramDoc(
            program_name=doc.program_name,
            description=doc.description,
            synopsis=doc.synopsis,
            options=tuple(new_entries),
            source_path=doc.source_path,
            warnings=doc.warnings,
        )

    # --- extraction ---

    def extract_constraints(self, doc: ProgramDoc) -> list[CandidateConstraint]:
        """One n-sampled extraction request; union of all parseable samples."""
        if not doc.options:
            return []
        req = make_request(StageTag.EXTRACT, [
            ("system", prompts.SYSTEM_ANALYST),
            ("user", prompts.extract_constraints_prompt(doc)),
        ], n_samples=self.config.extraction_samples)
        completions = self.gateway.complete(req)

        known = doc.option_keys()
        merged: dict = {}
        parsed_any = False
        for completion in completions:
            try:
                payload = parse_structured(completion.text, StageTag.EXTRACT)
            except UnparseableOutput:
                continue
            parsed_any = True
            for cand in self._payload_to_candidates(payload, known):
                prev = merged.get(cand.identity())
                if prev is None:
                    merged[cand.identity()] = cand
                else:
                    merged[cand.identity()] = CandidateConstraint(
                        prev.kind, prev.subject, prev.objects,
                        prev.evidence or cand.evidence,
                        prev.sample_count + 1,
                    )
        if not parsed_any:
            raise EmptyExtraction("all extraction samples were unparseable")
        return list(merged.values())

    @staticmethod
    def _payload_to_candidates(payload: dict, known_keys: set[str]):
        for item in payload.get("conflicts", []):
            options = item.get("options") if isinstance(item, dict) else item
            if not isinstance(options, list) or len(set(options)) < 2:
                continue
            if not all(isinstance(o, str) for o in options):
                continue
            unknown = [o for o in options if o not in known_keys]
            if unknown:
                log.warning("dropping conflict with unknown keys: %s", unknown)
                continue
            reason = item.get("reason", "") if isinstance(item, dict) else ""
            yield normalized_conflict(options, reason)
        for item in payload.get("dependencies", []):
            if not isinstance(item, dict):
                continue
            subject = item.get("option")
            requires = item.get("requires")
            if isinstance(requires, str):
                requires = [requires]
            if not isinstance(subject, str) or not isinstance(requires, list) or not requires:
                continue
            requires = [r for r in requires if isinstance(r, str) and r != subject]
            if not requires:
                continue
            unknown = [o for o in [subject, *requires] if o not in known_keys]
            if unknown:
                log.warning("dropping dependency with unknown keys: %s", unknown)
                continue
            yield CandidateConstraint(DEPENDENCY, subject, tuple(dict.fromkeys(requires)),
                                      item.get("reason", ""))

    # --- self-check ---

    def self_check(self, c: CandidateConstraint, doc: ProgramDoc) -> SelfCheckVerdict:
        """Run the configured number of independent evaluation rounds."""
        verification, counterexample = make_bidirectional_questions(c)
        context = prompts.format_options(
            e for e in doc.options if set(e.keys) & set(c.options)
        )
        rounds: list[tuple[str, str]] = []
        notes: list[str] = []
        for _ in range(self.config.evaluation_count):
            req = make_request(StageTag.SELFCHECK, [
                ("system", prompts.SYSTEM_ANALYST),
                ("user", prompts.self_check_prompt(verification, counterexample, context)),
            ])
            completion = self.gateway.complete(req)[0]
            try:
                payload = parse_structured(completion.text, StageTag.SELFCHECK)
                pair = (normalize_answer(payload["verification"]),
                        normalize_answer(payload["counterexample"]))
                notes.append(str(payload.get("counterexample", "")))
            except UnparseableOutput:
                pair = ("", "")  # unnormalizable round counts as non-affirming
                notes.append(completion.text[:200])
            rounds.append(pair)
        return SelfCheckVerdict(tuple(rounds), self.config.vote_threshold, tuple(notes))

    def validate_all(self, candidates, doc: ProgramDoc,
                     ) -> tuple[list[ValidatedConstraint], list[dict]]:
        """Self-check every candidate; returns (validated, rejection log).

        Candidates run concurrently up to config.concurrency; results keep
        candidate order either way.
        """
        todo = list(candidates)
        if self.config.split_pairwise:
            todo = [p for c in todo for p in expand_pairwise(c)]

        def check(cand):
            try:
                return cand, self.self_check(cand, doc), None
            except ProphetError as exc:
                log.warning("self-check failed for %s: %s", cand.options, exc)
                return cand, None, str(exc)

        if self.config.concurrency > 1 and len(todo) > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
                outcomes = list(pool.map(check, todo))
        else:
            outcomes = [check(cand) for cand in todo]

        validated: list[ValidatedConstraint] = []
        rejections: list[dict] = []
        for cand, verdict, error in outcomes:
            if error is not None:
                rejections.append({"candidate": cand.to_dict(), "error": error})
            elif verdict.valid:
                validated.append(ValidatedConstraint(cand, verdict))
            else:
                rejections.append({"candidate": cand.to_dict(),
                                   "verdict": verdict.to_dict()})
        return validated, rejections


def expand_pairwise(c: CandidateConstraint) -> list[CandidateConstraint]:
    """Split a multi-option constraint into pairwise constraints."""
    if len(c.objects) == 1:
        return [c]
    if c.kind == CONFLICT:
        opts = c.options
        return [
            normalized_conflict((opts[i], opts[j]), c.evidence, c.sample_count)
            for i in range(len(opts)) for j in range(i + 1, len(opts))
        ]
    return [CandidateConstraint(DEPENDENCY, c.subject, (obj,), c.evidence, c.sample_count)
            for obj in c.objects]


# --- artifact serialization ---


def constraints_to_doc(validated, rejections=None) -> dict:
    out = {"conflicts": [], "dependencies": []}
    for vc in validated:
        section = "conflicts" if vc.kind == CONFLICT else "dependencies"
        out[section].append(vc.to_dict())
    for section in ("conflicts", "dependencies"):
        out[section].sort(key=lambda d: d["options"])
    if rejections is not None:
        out["rejected"] = rejections
    return out


def constraints_from_doc(payload: dict) -> list[ValidatedConstraint]:
    out = []
    for kind, section in ((CONFLICT, "conflicts"), (DEPENDENCY, "dependencies")):
        for item in payload.get(section, []):
            options = item["options"]
            cand = (normalized_conflict(options, item.get("evidence", ""),
                                        item.get("sample_count", 1))
                    if kind == CONFLICT else
                    CandidateConstraint(kind, options[0], tuple(options[1:]),
                                        item.get("evidence", ""),
                                        item.get("sample_count", 1)))
            v = item["verdict"]
            verdict = SelfCheckVerdict(tuple((a, b) for a, b in v["rounds"]),
                                       v["threshold"])
            out.append(ValidatedConstraint(cand, verdict))
    return out


# --- precision/recall harness ---


def evaluate_against_annotations(validated, annotation_path) -> dict:
    """Compare validated constraints to a human annotation file.

    The annotation file is a JSON list of {kind, options, label: "TP"/"FP",
    program?}. Precision counts extracted constraints labeled TP; recall
    counts how many TP annotations were extracted. Unannotated extractions
    are reported separately, not guessed.
    """
    annotations = jsonio.load(annotation_path)
    truth: dict = {}
    for a in annotations:
        kind = a["kind"]
        key = (kind, frozenset(a["options"])) if kind == CONFLICT else \
              (kind, a["options"][0], tuple(a["options"][1:]))
        truth[key] = (a["label"].upper(), a.get("program", ""))

    per_program: dict[str, dict] = {}

    def bucket(program: str) -> dict:
        return per_program.setdefault(program, {"tp": 0, "fp": 0, "unannotated": 0,
                                                "truth_total": 0})

    for key, (label, program) in truth.items():
        if label == "TP":
            bucket(program)["truth_total"] += 1

    extracted_keys = set()
    for vc in validated:
        key = vc.constraint.identity()
        extracted_keys.add(key)
        label, program = truth.get(key, (None, ""))
        b = bucket(program)
        if label == "TP":
            b["tp"] += 1
        elif label == "FP":
            b["fp"] += 1
        else:
            b["unannotated"] += 1

    def rates(b: dict) -> dict:
        annotated = b["tp"] + b["fp"]
        return {
            **b,
            "precision": (b["tp"] / annotated) if annotated else None,
            "recall": (b["tp"] / b["truth_total"]) if b["truth_total"] else None,
        }

    overall = {"tp": 0, "fp": 0, "unannotated": 0, "truth_total": 0}
    for b in per_program.values():
        for k in overall:
            overall[k] += b[k]
    report = {"overall": rates(overall),
              "per_program": {p: rates(b) for p, b in sorted(per_program.items()) if p}}
    return report
