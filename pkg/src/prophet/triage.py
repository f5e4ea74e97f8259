"""Crash triage, deduplication, and campaign metrics.

Call stacks are parsed from ASAN and GDB report text; sanitizer-internal
frames (a configurable skip list) are dropped, and crashes are grouped by
the first three remaining frames. Results from repeated campaign runs are
unioned before counting.
"""

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import jsonio

log = logging.getLogger(__name__)

# "    #0 0x55.. in func /path/file.c:12:3" (ASAN)
_ASAN_FRAME = re.compile(
    r"^\s*#(\d+)\s+0x[0-9a-fA-F]+\s+in\s+(\S+)\s+(?:\(?([^\s()]+?)(?::(\d+))?(?::\d+)?\)?)?\s*(?:\(BuildId[^)]*\))?\s*$"
)
# "#0  0x55.. in func (args...) at file.c:12" or "#0  func (args) at file.c:12" (GDB)
_GDB_FRAME = re.compile(
    r"^#(\d+)\s+(?:0x[0-9a-fA-F]+\s+in\s+)?(\S+)\s*\(.*?\)\s+(?:at\s+(\S+?)(?::(\d+))?)?\s*$"
)
_MODULE_ONLY = re.compile(r"^\s*#(\d+)\s+0x[0-9a-fA-F]+\s+\((\S+?)\+0x[0-9a-fA-F]+\)")


def default_skip_list() -> list[str]:
    return jsonio.loads(
        resources.files("prophet.data").joinpath("sanitizer_skip.json").read_text()
    )


@dataclass(frozen=True)
class Frame:
    function: str
    file: str = ""
    line: int | None = None

    def as_tuple(self):
        return (self.function, self.file, self.line)

    def to_dict(self):
        return {"function": self.function, "file": self.file, "line": self.line}


@dataclass(frozen=True)
class CrashReport:
    command_ref: str
    input_path: str
    report_text: str
    frames: tuple[Frame, ...]
    combination_ref: str = ""

    @property
    def parseable(self) -> bool:
        return bool(self.frames)


def parse_frames(report_text: str, skip_list=None) -> tuple[Frame, ...]:
    """Top-down frames of the first stack in an ASAN or GDB report."""
    if skip_list is None:
        skip_list = default_skip_list()
    frames: list[Frame] = []
    started = False
    expected = 0
    for line in report_text.splitlines():
        m = _ASAN_FRAME.match(line) or _GDB_FRAME.match(line)
        func = file = None
        lineno = None
        idx = None
        if m:
            idx = int(m.group(1))
            func = m.group(2)
            file = m.group(3) or ""
            lineno = int(m.group(4)) if m.group(4) else None
        else:
            m2 = _MODULE_ONLY.match(line)
            if m2:
                idx = int(m2.group(1))
                func = "<unknown>"
                file = m2.group(2)
        if func is None:
            if started and line.strip() == "":
                break  # end of the first stack
            continue
        if started and idx == 0:
            break  # a second stack begins (freed-by / allocated-by)
        if not started and idx != 0:
            continue
        started = True
        if idx != expected:
            if idx < expected:
                break
        expected = idx + 1
        if any(_skip_match(func, pat) for pat in skip_list):
            continue
        frames.append(Frame(func, file, lineno))
    return tuple(frames)


def _skip_match(func: str, pattern: str) -> bool:
    if pattern.endswith("*"):
        return func.startswith(pattern[:-1])
    return func == pattern


def make_report(command_ref: str, input_path: str, text: str,
                combination_ref: str = "", skip_list=None) -> CrashReport:
    return CrashReport(command_ref, input_path, text,
                       parse_frames(text, skip_list), combination_ref)


@dataclass
class UniqueVulnerability:
    key: tuple  # first three frame tuples (fewer when shallow)
    representative: CrashReport
    crashes: list = field(default_factory=list)
    combinations: set = field(default_factory=set)
    shallow: bool = False

    def to_dict(self) -> dict:
        return {
            "key": [list(f) for f in self.key],
            "shallow": self.shallow,
            "crashes": [
                {"command": c.command_ref, "input": c.input_path,
                 "combination": c.combination_ref}
                for c in self.crashes
            ],
            "combinations": sorted(self.combinations),
        }


@dataclass
class TriageIndex:
    vulns: list
    quarantined: list

    def to_dict(self) -> dict:
        return {
            "vulns": [v.to_dict() for v in self.vulns],
            "quarantined": [
                {"command": c.command_ref, "input": c.input_path,
                 "report_text": c.report_text[:2000]}
                for c in self.quarantined
            ],
        }

    def keys(self) -> set:
        return {v.key for v in self.vulns}


def triage_crashes(reports) -> TriageIndex:
    """Group crash reports by their first-three-frame key.

    Crashes with fewer than three parseable frames key on all available
    frames and are flagged shallow; reports with none are quarantined.
    The representative crash is the earliest seen.
    """
    vulns: dict[tuple, UniqueVulnerability] = {}
    quarantined: list[CrashReport] = []
    for report in reports:
        if not report.parseable:
            quarantined.append(report)
            continue
        key = tuple(f.as_tuple() for f in report.frames[:3])
        entry = vulns.get(key)
        if entry is None:
            entry = UniqueVulnerability(
                key=key, representative=report,
                shallow=len(report.frames) < 3,
            )
            vulns[key] = entry
        entry.crashes.append(report)
        if report.combination_ref:
            entry.combinations.add(report.combination_ref)
    return TriageIndex(list(vulns.values()), quarantined)


def dedup_crashes(reports) -> list[UniqueVulnerability]:
    return triage_crashes(reports).vulns


# --- metrics ---


@dataclass
class ReportMetrics:
    program: str
    command_count: int
    predicted_combination_count: int
    unique_vulnerability_count: int
    vulnerable_combination_count: int
    vulnerable_combination_ratio: float
    edge_coverage: int | None
    costs: dict = field(default_factory=dict)
    exclusions: dict = field(default_factory=dict)
    quarantined_count: int = 0

    def to_dict(self) -> dict:
        return {
            "program": self.program,
            "command_count": self.command_count,
            "predicted_combination_count": self.predicted_combination_count,
            "unique_vulnerability_count": self.unique_vulnerability_count,
            "vulnerable_combination_count": self.vulnerable_combination_count,
            "vulnerable_combination_ratio": self.vulnerable_combination_ratio,
            "vulnerable_combination_ratio_pct": format_ratio(self.vulnerable_combination_ratio),
            "edge_coverage": self.edge_coverage,
            "costs": self.costs,
            "exclusions": self.exclusions,
            "quarantined_count": self.quarantined_count,
        }


def format_ratio(ratio: float) -> str:
    return f"{ratio * 100:.2f}%"


def union_indexes(indexes) -> TriageIndex:
    """Union triage results across repetitions (same key = same vuln)."""
    merged: dict[tuple, UniqueVulnerability] = {}
    quarantined: list = []
    for index in indexes:
        quarantined.extend(index.quarantined)
        for vuln in index.vulns:
            entry = merged.get(vuln.key)
            if entry is None:
                merged[vuln.key] = UniqueVulnerability(
                    key=vuln.key, representative=vuln.representative,
                    crashes=list(vuln.crashes),
                    combinations=set(vuln.combinations), shallow=vuln.shallow,
                )
            else:
                entry.crashes.extend(vuln.crashes)
                entry.combinations |= vuln.combinations
    return TriageIndex(list(merged.values()), quarantined)


def read_coverage(map_dir) -> int | None:
    """Count distinct edges with nonzero hits across showmap-format files.

    Missing or empty map directories report unavailable (None), never zero.
    """
    if map_dir is None:
        return None
    map_dir = Path(map_dir)
    if not map_dir.is_dir():
        return None
    edges: set[str] = set()
    files = sorted(map_dir.glob("*.map"))
    if not files:
        return None
    for path in files:
        for line in path.read_text(errors="replace").splitlines():
            if ":" not in line:
                continue
            edge, count = line.split(":", 1)
            try:
                if int(count) > 0:
                    edges.add(edge.strip())
            except ValueError:
                continue
    return len(edges)


def compute_metrics(program: str, indexes, predicted_refs, command_count: int,
                    coverage_dir=None, costs=None, exclusions=None) -> ReportMetrics:
    """Metrics over the union of repetition triage indexes.

    `predicted_refs` are the post-filter combination references; one counts
    as vulnerable when at least one unique vulnerability references it.
    """
    union = union_indexes(indexes)
    vulnerable = set()
    for vuln in union.vulns:
        vulnerable |= vuln.combinations
    predicted_refs = list(predicted_refs)
    vulnerable &= set(predicted_refs)
    predicted = len(predicted_refs)
    ratio = (len(vulnerable) / predicted) if predicted else 0.0
    return ReportMetrics(
        program=program,
        command_count=command_count,
        predicted_combination_count=predicted,
        unique_vulnerability_count=len(union.vulns),
        vulnerable_combination_count=len(vulnerable),
        vulnerable_combination_ratio=ratio,
        edge_coverage=read_coverage(coverage_dir),
        costs=costs or {},
        exclusions=exclusions or {},
        quarantined_count=len(union.quarantined),
    )


def ref_for_combination(index: int) -> str:
    return f"combo-{index:04d}"


def render_markdown(metrics: ReportMetrics) -> str:
    cov = metrics.edge_coverage if metrics.edge_coverage is not None else "unavailable"
    lines = [
        f"# Campaign report: {metrics.program}",
        "",
        "| Program | #Cmds | #Uniq Vuls | Vul Com Ratio | #Edge Cov |",
        "|---|---|---|---|---|",
        f"| {metrics.program} | {metrics.command_count} "
        f"| {metrics.unique_vulnerability_count} "
        f"| {format_ratio(metrics.vulnerable_combination_ratio)} | {cov} |",
        "",
        f"Predicted combinations: {metrics.predicted_combination_count} "
        f"({metrics.vulnerable_combination_count} vulnerable)",
    ]
    if metrics.quarantined_count:
        lines.append(f"Quarantined unparseable reports: {metrics.quarantined_count}")
    if metrics.costs:
        lines.append(f"LLM cost: {metrics.costs.get('total', '0')} "
                     f"({metrics.costs.get('requests', 0)} requests)")
    if metrics.exclusions:
        parts = ", ".join(f"{k}: {v}" for k, v in sorted(metrics.exclusions.items()))
        lines.append(f"Exclusions: {parts}")
    return "\n".join(lines) + "\n"


def diff_indexes(mine: TriageIndex, theirs: TriageIndex) -> dict:
    """Exclusive vulnerabilities on each side (for tool-vs-tool reports)."""
    my_keys = mine.keys()
    their_keys = theirs.keys()
    return {
        "exclusive_mine": [list(map(list, k)) for k in sorted(my_keys - their_keys)],
        "exclusive_theirs": [list(map(list, k)) for k in sorted(their_keys - my_keys)],
        "shared": len(my_keys & their_keys),
    }
