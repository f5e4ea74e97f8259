"""Groff manpage parsing.

Turns a `.1`/`.8`-style manual page into a structured ProgramDoc: program
name from `.TH`, sections located by `.SH` titles, option entries segmented
by `.TP`/`.IP`/`.PP`/`.RS`/`.sp`. Formatting is reduced to plain text with
`col -b` semantics (backspace overstrikes resolved, font escapes dropped).

Inputs need not be well-formed Groff: pre-rendered text without a `.TH`
line falls back to all-caps header detection, and arbitrary bytes never
raise anything other than MissingSection.
"""

import logging
import re
from dataclasses import dataclass, field

from .errors import MissingSection
from . import jsonio

log = logging.getLogger(__name__)

OPTIONS_TITLES = {"OPTIONS", "OPTION", "FLAGS", "SWITCHES"}
SYNOPSIS_TITLES = {"SYNOPSIS", "USAGE"}
DESCRIPTION_TITLES = {"DESCRIPTION"}

# \(xx and \[xx] special characters that matter in option text.
_SPECIALS = {
    "em": "-", "en": "-", "hy": "-", "mi": "-",
    "aq": "'", "cq": "'", "oq": "'", "ga": "'",
    "dq": '"', "lq": '"', "rq": '"',
    "bu": "*", "co": "(C)", "rg": "(R)", "tm": "(TM)",
    "or": "|", "at": "@", "sh": "#", "ti": "~", "ha": "^",
    "rs": "", "ul": "_", "ru": "_",
    "<-": "<-", "->": "->", "+-": "+/-",
}


@dataclass(frozen=True)
class OptionEntry:
    """One documented option: its key aliases, prose, and value hint."""

    keys: tuple[str, ...]
    description: str
    takes_value: str = "unknown"  # "yes" | "no" | "unknown"

    def to_dict(self) -> dict:
        return {
            "keys": list(self.keys),
            "description": self.description,
            "takes_value": self.takes_value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptionEntry":
        return cls(tuple(d["keys"]), d["description"], d.get("takes_value", "unknown"))


@dataclass(frozen=True)
class ProgramDoc:
    """Parsed manpage content; the inter-stage wire format of the pipeline."""

    program_name: str
    description: str
    synopsis: str
    options: tuple[OptionEntry, ...]
    source_path: str = ""
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def option_keys(self) -> set[str]:
        return {k for entry in self.options for k in entry.keys}

    def find_option(self, key: str) -> OptionEntry | None:
        for entry in self.options:
            if key in entry.keys:
                return entry
        return None

    def to_dict(self) -> dict:
        return {
            "program_name": self.program_name,
            "description": self.description,
            "synopsis": self.synopsis,
            "options": [o.to_dict() for o in self.options],
            "source_path": self.source_path,
        }

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ProgramDoc":
        return cls(
            program_name=d["program_name"],
            description=d["description"],
            synopsis=d["synopsis"],
            options=tuple(OptionEntry.from_dict(o) for o in d["options"]),
            source_path=d.get("source_path", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "ProgramDoc":
        return cls.from_dict(jsonio.loads(text))


def render_plain(text: str) -> str:
    """Reduce Groff-formatted text to plain readable text.

    Resolves backspace overstrikes the way ``col -b`` does (the last
    character written at a position wins), then consumes every backslash
    escape in a single left-to-right pass. The output never contains
    backslashes or backspaces, which makes the function idempotent.
    Lossy by design.
    """
    text = _strip_overstrikes(text)
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        if i + 1 >= n:
            break  # trailing backslash: drop
        nxt = text[i + 1]
        if nxt == "-":
            out.append("-")
            i += 2
        elif nxt in "&%:|^}{acdpruz":  # zero-width / motion / continuation escapes
            i += 2
        elif nxt == " " or nxt == "0" or nxt == "~":
            out.append(" ")
            i += 2
        elif nxt == "e" or nxt == "\\":
            # literal backslash; dropped so output stays escape-free
            i += 2
        elif nxt == "f":  # font: \fB, \fI, \fR, \fP, \f1, \f(XX, \f[name]
            i += 2
            if i < n and text[i] == "(":
                i += 3
            elif i < n and text[i] == "[":
                end = text.find("]", i)
                i = end + 1 if end != -1 else n
            elif i < n:
                i += 1
        elif nxt == "s":  # point size: \s+2, \s-2, \s0
            i += 2
            if i < n and text[i] in "+-":
                i += 1
            while i < n and text[i].isdigit():
                i += 1
        elif nxt == "(":
            name = text[i + 2 : i + 4]
            out.append(_SPECIALS.get(name, ""))
            i += 4
        elif nxt == "[":
            end = text.find("]", i + 2)
            if end == -1:
                i = n
            else:
                out.append(_SPECIALS.get(text[i + 2 : end], ""))
                i = end + 1
        elif nxt == "*":  # string interpolation \*x, \*(xx, \*[name]: drop
            i += 2
            if i < n and text[i] == "(":
                i += 3
            elif i < n and text[i] == "[":
                end = text.find("]", i)
                i = end + 1 if end != -1 else n
            elif i < n:
                i += 1
        elif nxt == '"':  # comment to end of line
            eol = text.find("\n", i)
            i = eol if eol != -1 else n
        else:
            # unknown escape: keep the escaped character verbatim
            out.append(nxt)
            i += 2
    return "".join(out)


def _strip_overstrikes(text: str) -> str:
    if "\b" not in text:
        return text
    out: list[str] = []
    for ch in text:
        if ch == "\b":
            if out:
                out.pop()
        else:
            out.append(ch)
    return "".join(out)


def parse_manpage(groff_text: str, source_path: str = "") -> ProgramDoc:
    """Parse manpage text into a ProgramDoc.

    Raises MissingSection if no OPTIONS or no SYNOPSIS section can be
    located. A missing DESCRIPTION only produces a warning.
    """
    lines = groff_text.splitlines()
    name = _find_th_name(lines)
    if name is not None:
        sections = _split_groff_sections(lines)
    else:
        sections = _split_plaintext_sections(lines)
        name = ""

    warnings: list[str] = []
    opt_body = _pick_section(sections, OPTIONS_TITLES)
    syn_body = _pick_section(sections, SYNOPSIS_TITLES)
    desc_body = _pick_section(sections, DESCRIPTION_TITLES)
    if opt_body is None:
        raise MissingSection("OPTIONS")
    if syn_body is None:
        raise MissingSection("SYNOPSIS")
    if desc_body is None:
        warnings.append("no DESCRIPTION section")
        log.warning("%s: no DESCRIPTION section", source_path or "<text>")
        desc_body = []

    options = _parse_option_entries(opt_body)
    return ProgramDoc(
        program_name=name,
        description=_render_body(desc_body),
        synopsis=_render_body(syn_body),
        options=tuple(options),
        source_path=source_path,
        warnings=tuple(warnings),
    )


def parse_manpage_file(path) -> ProgramDoc:
    """Read a manpage file as UTF-8 (invalid bytes replaced) and parse it."""
    raw = open(path, "rb").read()
    return parse_manpage(raw.decode("utf-8", errors="replace"), source_path=str(path))


def _find_th_name(lines: list[str]) -> str | None:
    for line in lines:
        m = re.match(r"^[.']\s*TH\s+(\S+)", line)
        if m:
            return render_plain(m.group(1).strip('"'))
    return None


def _section_title(line: str) -> str | None:
    m = re.match(r"^[.']\s*SH\s+(.+)$", line, re.IGNORECASE)
    if not m:
        return None
    return render_plain(m.group(1)).strip().strip('"').strip().upper()


def _split_groff_sections(lines: list[str]) -> list[tuple[str, list[str]]]:
    sections: list[tuple[str, list[str]]] = []
    current: list[str] | None = None
    for line in lines:
        title = _section_title(line)
        if title is not None:
            current = []
            sections.append((title, current))
        elif current is not None:
            current.append(line)
    return sections


def _split_plaintext_sections(lines: list[str]) -> list[tuple[str, list[str]]]:
    """Fallback for pre-rendered pages: sections begin at all-caps headers."""
    sections: list[tuple[str, list[str]]] = []
    current: list[str] | None = None
    for line in lines:
        stripped = _strip_overstrikes(line).strip()
        if (
            stripped
            and not line[:1].isspace()
            and re.fullmatch(r"[A-Z][A-Z0-9 _-]*", stripped)
            and len(stripped) <= 40
        ):
            current = []
            sections.append((stripped.upper(), current))
        elif current is not None:
            current.append(line)
    return sections


def _pick_section(sections, titles: set[str]) -> list[str] | None:
    for title, body in sections:
        if title in titles:
            return body
    return None


def _is_comment(line: str) -> bool:
    return line.startswith((".\\\"", "'\\\"", ".\\#"))


def _render_body(body: list[str]) -> str:
    """Render a section body to plain paragraphs, dropping macro lines."""
    paras: list[list[str]] = [[]]
    for line in body:
        if _is_comment(line):
            continue
        if re.match(r"^[.']\s*(PP|P|LP|sp|br|TP|IP|HP|RS|RE|nf|fi|ad|na|in|ti|ne|IX|PD)\b", line):
            m = re.match(r"^[.']\s*(?:TP|IP|HP)\s+\"?(.*?)\"?\s*$", line)
            if m and m.group(1) and not m.group(1).isdigit():
                paras.append([render_plain(m.group(1))])
            elif paras[-1]:
                paras.append([])
            continue
        if line.startswith((".", "'")):
            # other macros: keep quoted text arguments of .B/.I/.BI etc.
            m = re.match(r"^[.']\s*[A-Z]{1,3}\s+(.*)$", line)
            if m:
                paras[-1].append(render_plain(m.group(1)).replace('"', ""))
            continue
        text = render_plain(line).strip()
        if text:
            paras[-1].append(text)
        elif paras[-1]:
            paras.append([])
    chunks = [" ".join(p).strip() for p in paras]
    return "\n\n".join(c for c in chunks if c)


# --- option entry segmentation ---


def _parse_option_entries(body: list[str]) -> list[OptionEntry]:
    raw_entries = _segment_entries(body)
    entries = []
    for tag, italic_arg, desc_lines in raw_entries:
        keys, takes_value = _parse_option_tag(tag, italic_arg)
        if not keys:
            continue
        entries.append(
            OptionEntry(
                keys=keys,
                description=_render_body(desc_lines).strip(),
                takes_value=takes_value,
            )
        )
    return entries


def _segment_entries(body: list[str]) -> list[tuple[str, bool, list[str]]]:
    """Split an options section body into (tag, italic-arg hint, body lines).

    `.TP`/`.IP` at indent depth zero start a new entry; `.RS`/`.RE` track
    depth so that nested paragraphs stay attached to the current entry.
    `.PP` and `.sp` at depth zero end the current entry. The hint records
    whether the tag line used an italic-alternating macro (`.BI`, `.RI`),
    whose italic argument is a metavariable.
    """
    entries: list[tuple[str, bool, list[str]]] = []
    depth = 0
    pending_tp = False
    current: list[str] | None = None

    for line in body:
        if _is_comment(line):
            continue
        if pending_tp:
            italic = False
            if line.startswith((".", "'")):
                tag = _macro_arg_text(line)
                italic = bool(re.match(r"^[.']\s*(BI|IB|RI|IR|I)\b", line))
            else:
                tag = line
            entries.append((tag, italic, []))
            current = entries[-1][2]
            pending_tp = False
            continue
        if re.match(r"^[.']\s*RS\b", line):
            depth += 1
            if current is not None:
                current.append(line)
            continue
        if re.match(r"^[.']\s*RE\b", line):
            depth = max(0, depth - 1)
            if current is not None:
                current.append(line)
            continue
        if depth == 0:
            if re.match(r"^[.']\s*TP\b", line):
                pending_tp = True
                continue
            m = re.match(r"^[.']\s*IP\s+\"?(.+?)\"?(?:\s+\d+)?\s*$", line)
            if m:
                tag = m.group(1).strip()
                if tag.isdigit() or tag in ("\\(bu", "\\[bu]", "*", "-"):
                    # bare indent / bullet: paragraph inside the current entry
                    if current is not None:
                        current.append(".PP")
                else:
                    entries.append((tag, False, []))
                    current = entries[-1][2]
                continue
            if re.match(r"^[.']\s*(PP|P|LP|sp)\b", line):
                current = None
                continue
        if current is not None:
            current.append(line)
    return entries


def _macro_arg_text(line: str) -> str:
    m = re.match(r"^[.']\s*\S+\s+(.*)$", line)
    return m.group(1) if m else ""


_KEY_TOKEN = re.compile(r"^(--?[A-Za-z0-9][-A-Za-z0-9_.+]*)")


def _parse_option_tag(tag: str, italic_arg: bool = False) -> tuple[tuple[str, ...], str]:
    """Extract option keys and a takes-value hint from an entry tag line.

    "-o FILE" and "--limit=N" read as value-taking; a bare comma list of
    keys reads as valueless; anything murkier stays "unknown". The hint is
    only a seed: later stages re-verify against the synopsis.
    """
    has_italic_arg = italic_arg or bool(re.search(r"\\fI[^\\]", tag))
    plain = render_plain(tag).strip()
    if not plain:
        return (), "unknown"

    keys: list[str] = []
    saw_metavar = False
    trailing_junk = False
    for chunk in re.split(r",\s*", plain):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split()
        if not parts:
            continue
        m = _KEY_TOKEN.match(parts[0])
        if m:
            key = m.group(1)
            if key not in keys:
                keys.append(key)
            rest = parts[0][m.end():] + (" " + " ".join(parts[1:]) if len(parts) > 1 else "")
            rest = rest.strip()
            if rest:
                if re.search(r"^=|^\[=|[A-Z]{2,}|<[^>]+>", rest) or has_italic_arg:
                    saw_metavar = True
                else:
                    trailing_junk = True
        elif not keys and len(parts) == 1 and re.fullmatch(r"[A-Za-z][A-Za-z0-9_-]*", parts[0]):
            # documented bare subcommand token (e.g. "help")
            keys.append(parts[0])
        else:
            trailing_junk = True

    if not keys:
        return (), "unknown"
    if saw_metavar:
        takes = "yes"
    elif not trailing_junk:
        takes = "no"
    else:
        takes = "unknown"
    return tuple(keys), takes
