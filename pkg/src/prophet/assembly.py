"""Command assembly and file-script generation.

Each predicted combination becomes n = 3 x N sampled command drafts (N =
value-taking options in the combination, floor of one draft), validated
and mechanically repaired: shell operators truncate the draft to its first
command, fileN placeholder gaps are renumbered, and drafts that dropped a
predicted option are discarded. Every draft with placeholders then gets a
Python file-generation script, which is scanned for leftover fill-me
placeholders and re-prompted once before rejection.
"""

import ast
import logging
import re
import sys
from dataclasses import dataclass, field

from . import prompts
from .docparse import ProgramDoc
from .errors import AssemblyFailed, ScriptRejected, UnparseableOutput
from .gateway import LlmGateway, StageTag, make_request, parse_structured
from .prediction import RiskCombination

log = logging.getLogger(__name__)

SHELL_OPERATORS = {"&&", "||", ";", "|", ">", ">>", "<", "2>", "2>>", "&"}

ROLES = ("input", "config", "output", "aux")


@dataclass(frozen=True)
class FilePlaceholder:
    name: str
    expected_format: str = ""
    role: str = "input"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"bad placeholder role: {self.role}")

    def to_dict(self) -> dict:
        return {"name": self.name, "format": self.expected_format, "role": self.role}

    @classmethod
    def from_dict(cls, d: dict) -> "FilePlaceholder":
        role = d.get("role", "input")
        if role not in ROLES:
            role = "aux"
        return cls(d["name"], d.get("format", ""), role)


@dataclass(frozen=True)
class DraftCommand:
    combination_ref: str
    argv_template: tuple[str, ...]
    assigned_values: dict
    placeholders: tuple[FilePlaceholder, ...]
    repairs: tuple[str, ...] = field(default=(), compare=False)

    def placeholder_names(self) -> list[str]:
        return [p.name for p in self.placeholders]

    def to_dict(self) -> dict:
        return {
            "combination_ref": self.combination_ref,
            "argv_template": list(self.argv_template),
            "values": dict(sorted(self.assigned_values.items())),
            "placeholders": [p.to_dict() for p in self.placeholders],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DraftCommand":
        return cls(
            combination_ref=d.get("combination_ref", ""),
            argv_template=tuple(d["argv_template"]),
            assigned_values=dict(d.get("values", {})),
            placeholders=tuple(FilePlaceholder.from_dict(p) for p in d["placeholders"]),
        )


@dataclass(frozen=True)
class ScriptArtifact:
    placeholder_targets: tuple[str, ...]
    script_text: str
    declared_libraries: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "placeholder_targets": list(self.placeholder_targets),
            "script_text": self.script_text,
            "declared_libraries": list(self.declared_libraries),
        }


# fill-me patterns the model leaves behind despite instructions
FILLME_PATTERNS = [
    re.compile(r"your[ _][a-z0-9 _]*file", re.IGNORECASE),
    re.compile(r"path/to", re.IGNORECASE),
    re.compile(r"<\s*(?:your|insert|path|replace|file name|filename)[^>]*>", re.IGNORECASE),
    re.compile(r"\bREPLACE[ _-]?ME\b", re.IGNORECASE),
    re.compile(r"\bINSERT_[A-Z_]+\b"),
    re.compile(r"\.\.\.\s*#\s*(?:fill|replace)", re.IGNORECASE),
]


def scan_fillme(script_text: str) -> list[str]:
    hits = []
    for pattern in FILLME_PATTERNS:
        hits.extend(m.group(0) for m in pattern.finditer(script_text))
    return hits


def declared_libraries(script_text: str) -> tuple[str, ...]:
    """Top-level third-party imports, found by static scanning."""
    stdlib = set(getattr(sys, "stdlib_module_names", ()))
    names: set[str] = set()
    try:
        tree = ast.parse(script_text)
    except SyntaxError:
        for m in re.finditer(r"^\s*(?:import|from)\s+([A-Za-z_][A-Za-z0-9_]*)",
                             script_text, re.MULTILINE):
            names.add(m.group(1))
    else:
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                names.update(alias.name.split(".")[0] for alias in node.names)
            elif isinstance(node, ast.ImportFrom) and node.module and node.level == 0:
                names.add(node.module.split(".")[0])
    return tuple(sorted(n for n in names if n not in stdlib))


_CODE_FENCE = re.compile(r"```(?:python|py)?\s*\n(.*?)```", re.DOTALL)


def extract_code(text: str) -> str:
    m = _CODE_FENCE.search(text)
    return (m.group(1) if m else text).strip()


@dataclass
class AssemblerConfig:
    samples_per_value_option: int = 3
    prefer_uncommon_values: bool = False


class CommandAssembler:
    def __init__(self, gateway: LlmGateway, config: AssemblerConfig | None = None):
        self.gateway = gateway
        self.config = config or AssemblerConfig()

    # --- value cross-check ---

    def value_options(self, doc: ProgramDoc, combo: RiskCombination) -> list[str]:
        """Which combination options take values, per the model's synopsis
        cross-check; falls back to the parser's hint on unparseable output."""
        req = make_request(StageTag.ASSEMBLE, [
            ("system", prompts.SYSTEM_ANALYST),
            ("user", prompts.value_check_prompt(doc, list(combo.options))),
        ])
        completion = self.gateway.complete(req)[0]
        try:
            payload = parse_structured(completion.text, StageTag.ASSEMBLE)
            listed = payload.get("value_options", [])
            return [o for o in combo.options if o in listed]
        except UnparseableOutput:
            log.warning("value check unparseable; using parser hints")
            return [
                o for o in combo.options
                if (e := doc.find_option(o)) is not None and e.takes_value == "yes"
            ]

    # --- assembly ---

    def assemble(self, doc: ProgramDoc, combo: RiskCombination,
                 combo_ref: str = "") -> list[DraftCommand]:
        value_opts = self.value_options(doc, combo)
        n = max(1, self.config.samples_per_value_option * len(value_opts))
        req = make_request(StageTag.ASSEMBLE, [
            ("system", prompts.SYSTEM_ANALYST),
            ("user", prompts.assemble_prompt(
                doc, list(combo.options), value_opts,
                prefer_uncommon=self.config.prefer_uncommon_values)),
        ], n_samples=n)
        completions = self.gateway.complete(req)

        drafts: list[DraftCommand] = []
        seen: set[tuple[str, ...]] = set()
        for completion in completions:
            draft = self._parse_draft(completion.text, combo, combo_ref, value_opts)
            if draft is None or draft.argv_template in seen:
                continue
            seen.add(draft.argv_template)
            drafts.append(draft)
        if not drafts:
            raise AssemblyFailed(f"no usable draft for combination {combo.options}")
        return drafts

    def _parse_draft(self, text: str, combo: RiskCombination, combo_ref: str,
                     value_opts: list[str]) -> DraftCommand | None:
        try:
            payload = parse_structured(text, StageTag.ASSEMBLE)
        except UnparseableOutput:
            return None
        if "argv" not in payload:
            return None
        argv = [str(t) for t in payload["argv"] if str(t)]
        repairs: list[str] = []

        # exclusivity: truncate at the first shell operator token
        for i, token in enumerate(argv):
            if token in SHELL_OPERATORS:
                argv = argv[:i]
                repairs.append(f"truncated at shell operator {token!r}")
                break
        if not argv:
            return None

        values = {str(k): str(v) for k, v in dict(payload.get("values", {})).items()}
        declared = [FilePlaceholder.from_dict(p) for p in payload.get("placeholders", [])
                    if isinstance(p, dict) and p.get("name")]

        # placeholders must be declared and referenced consistently; a
        # reference may sit inside a value token (e.g. "tls,file1")
        referenced = {
            m.group(0) for t in argv for m in re.finditer(r"\bfile\d+\b", t)
        }
        declared_names = [p.name for p in declared]
        for name in sorted(referenced):
            if name not in declared_names:
                declared.append(FilePlaceholder(name, "", "aux" if name != "file0" else "input"))
                declared_names.append(name)
                repairs.append(f"declared missing placeholder {name}")
        declared = [p for p in declared
                    if not re.fullmatch(r"file\d+", p.name) or p.name in referenced]

        if argv.count("file0") > 1:
            return None  # primary input must be exclusive; not mechanically repairable

        argv, declared, renumbered = _renumber_placeholders(argv, declared)
        if renumbered:
            repairs.append("renumbered placeholders to be contiguous")

        # assembly may add options, never drop predicted ones
        present = set(argv)
        if not set(combo.options) <= present:
            return None
        for opt in value_opts:
            if opt not in values and not _has_adjacent_value(argv, opt):
                return None

        names = [p.name for p in declared]
        if len(names) != len(set(names)):
            return None
        return DraftCommand(
            combination_ref=combo_ref,
            argv_template=tuple(argv),
            assigned_values=values,
            placeholders=tuple(declared),
            repairs=tuple(repairs),
        )

    # --- file-generation scripts ---

    def generate_filegen_script(self, draft: DraftCommand) -> ScriptArtifact:
        """Prompt for a script that fabricates the draft's placeholder files.

        Output-role placeholders are written by the target program, not the
        script. A script still containing fill-me placeholders after one
        re-prompt is rejected and the draft excluded downstream.
        """
        targets = [p for p in draft.placeholders if p.role != "output"]
        if not targets:
            raise ValueError("draft has no placeholders to generate")
        req = make_request(StageTag.FILEGEN, [
            ("system", prompts.SYSTEM_ANALYST),
            ("user", prompts.filegen_prompt(list(draft.argv_template), targets,
                                            draft.assigned_values)),
        ])
        script = extract_code(self.gateway.complete(req)[0].text)
        offending = scan_fillme(script)
        if offending:
            retry = make_request(StageTag.FILEGEN, [
                ("system", prompts.SYSTEM_ANALYST),
                ("user", prompts.filegen_retry_prompt(script, offending)),
            ])
            script = extract_code(self.gateway.complete(retry)[0].text)
            offending = scan_fillme(script)
            if offending:
                raise ScriptRejected(f"fill-me placeholders remain: {offending}")
        return ScriptArtifact(
            placeholder_targets=tuple(p.name for p in targets),
            script_text=script,
            declared_libraries=declared_libraries(script),
        )


def _has_adjacent_value(argv: list[str], opt: str) -> bool:
    """True when opt is followed by a non-option token or carries =value."""
    for i, token in enumerate(argv):
        if token == opt:
            nxt = argv[i + 1] if i + 1 < len(argv) else None
            return nxt is not None and not nxt.startswith("-")
        if token.startswith(opt + "="):
            return True
    return False


def _renumber_placeholders(argv: list[str], placeholders: list[FilePlaceholder]):
    """Make fileN names contiguous from file0, renaming argv consistently
    (embedded references inside value tokens included)."""
    indexed = sorted(
        (int(p.name[4:]), p) for p in placeholders if re.fullmatch(r"file\d+", p.name)
    )
    mapping = {}
    changed = False
    for new_idx, (old_idx, p) in enumerate(indexed):
        if old_idx != new_idx:
            changed = True
        mapping[p.name] = f"file{new_idx}"
    if not changed:
        return argv, placeholders, False

    def rename(token: str) -> str:
        return re.sub(r"\bfile\d+\b", lambda m: mapping.get(m.group(0), m.group(0)),
                      token)

    new_argv = [rename(t) for t in argv]
    new_placeholders = [
        FilePlaceholder(mapping.get(p.name, p.name), p.expected_format, p.role)
        for p in placeholders
    ]
    return new_argv, new_placeholders, True
