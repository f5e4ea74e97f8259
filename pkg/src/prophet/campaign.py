"""File reconciliation, fuzz-ready command finalization, and campaigns.

Generated files are matched to placeholders by exact name first, then by
the prefix rule (a produced name starting with a placeholder name matches
it; the longest placeholder name wins contested files, remaining ties go
by placeholder index). The selected input placeholder becomes the fuzzer's
"@@" slot and its seed is routed to the corpus. Campaigns schedule
commands round-robin across slots, run repetitions sequentially per
command, and collect crashes plus coverage maps by polling output dirs.
"""

import hashlib
import json
import logging
import re
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import jsonio
from .assembly import DraftCommand

log = logging.getLogger(__name__)

INPUT_KEYWORDS = ("input", "test", "source")


@dataclass(frozen=True)
class ExecutionReport:
    """What one sandboxed file-generation script run produced."""

    exit_status: int
    wall_time: float
    produced_files: tuple[tuple[str, int], ...]  # (name, size bytes)
    stdout_tail: str = ""
    stderr_tail: str = ""
    limit_violations: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "exit_status": self.exit_status,
            "wall_time": self.wall_time,
            "produced_files": [[n, s] for n, s in self.produced_files],
            "stdout_tail": self.stdout_tail,
            "stderr_tail": self.stderr_tail,
            "limit_violations": list(self.limit_violations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionReport":
        return cls(
            exit_status=int(d["exit_status"]),
            wall_time=float(d["wall_time"]),
            produced_files=tuple((str(n), int(s)) for n, s in d["produced_files"]),
            stdout_tail=str(d.get("stdout_tail", "")),
            stderr_tail=str(d.get("stderr_tail", "")),
            limit_violations=tuple(str(v) for v in d.get("limit_violations", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "ExecutionReport":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Excluded:
    """A draft that cannot proceed, with the reason recorded."""

    reason: str


@dataclass(frozen=True)
class ExecutableCommand:
    argv: tuple[str, ...]  # contains exactly one "@@"
    seed_file: str  # the input placeholder's generated file
    aux_files: dict  # placeholder name -> resolved path
    origin: str  # draft id
    combination_ref: str

    def __post_init__(self):
        if self.argv.count("@@") != 1:
            raise ValueError("an executable command must contain exactly one @@")

    def to_dict(self) -> dict:
        return {
            "argv": list(self.argv),
            "seed_file": self.seed_file,
            "aux_files": dict(sorted(self.aux_files.items())),
            "origin": self.origin,
            "combination_ref": self.combination_ref,
        }


def reconcile_files(draft: DraftCommand, report: ExecutionReport):
    """Match produced files to the draft's placeholders.

    Returns {placeholder name: produced name} or Excluded. Output-role
    placeholders are written by the target program later, so they are not
    required from the script.
    """
    required = [p for p in draft.placeholders if p.role != "output"]
    produced = [name for name, _ in report.produced_files]
    if len(produced) < len(required):
        return Excluded("missing files")

    by_len = sorted(enumerate(required), key=lambda ip: (-len(ip[1].name), ip[0]))
    unclaimed = set(produced)
    resolved: dict[str, str] = {}
    for _, placeholder in by_len:
        if placeholder.name in unclaimed:
            chosen = placeholder.name
        else:
            candidates = sorted(
                f for f in unclaimed if f.startswith(placeholder.name)
            )
            if not candidates:
                return Excluded("unrepairable names")
            chosen = candidates[0]
        unclaimed.remove(chosen)
        resolved[placeholder.name] = chosen
    return resolved


def mark_input(draft: DraftCommand, resolved: dict, workdir):
    """Pick the input placeholder, replace its token with "@@".

    Priority: "file0" if present; else the unique placeholder whose name
    contains input/test/source; else the sole placeholder. The input's
    file goes to the seed corpus; other placeholders resolve to real paths
    (output-role ones to a scratch subdirectory).
    """
    workdir = Path(workdir)
    names = draft.placeholder_names()
    if not names:
        return Excluded("no input file")
    if "file0" in names:
        input_name = "file0"
    else:
        keyword_hits = [
            n for n in names if any(k in n.lower() for k in INPUT_KEYWORDS)
        ]
        if len(keyword_hits) == 1:
            input_name = keyword_hits[0]
        elif len(keyword_hits) > 1:
            return Excluded("ambiguous input")
        elif len(names) == 1:
            input_name = names[0]
        else:
            return Excluded("no input file")

    if input_name not in resolved:
        return Excluded("no input file")

    aux: dict[str, str] = {}
    scratch = workdir / "out"
    for p in draft.placeholders:
        if p.name == input_name:
            continue
        if p.role == "output":
            aux[p.name] = str(scratch / p.name)
        else:
            aux[p.name] = str(workdir / resolved[p.name])

    # placeholder names may also sit inside value tokens ("tls,file1")
    seed_path = str(workdir / resolved[input_name])
    paths = dict(aux)
    paths[input_name] = seed_path
    pattern = re.compile(
        "|".join(rf"(?<!\w){re.escape(n)}(?!\w)"
                 for n in sorted(paths, key=len, reverse=True))
    )
    argv: list[str] = []
    for token in draft.argv_template:
        if token == input_name:
            argv.append("@@")
        elif token in aux:
            argv.append(aux[token])
        else:
            argv.append(pattern.sub(lambda m: paths[m.group(0)], token))
    if argv.count("@@") != 1:
        return Excluded("no input file")
    return ExecutableCommand(
        argv=tuple(argv),
        seed_file=seed_path,
        aux_files=aux,
        origin=draft.combination_ref,
        combination_ref=draft.combination_ref,
    )


# --- argv file format (option-aware fuzzer contract) ---


def format_argv_line(argv) -> str:
    """One command per line: space-separated tokens, embedded backslashes
    and spaces escaped with a backslash, "@@" literal."""
    return " ".join(t.replace("\\", "\\\\").replace(" ", "\\ ") for t in argv)


def parse_argv_line(line: str) -> list[str]:
    tokens: list[str] = []
    cur: list[str] = []
    escaped = False
    for ch in line.rstrip("\n"):
        if escaped:
            cur.append(ch)
            escaped = False
        elif ch == "\\":
            escaped = True
        elif ch == " ":
            if cur:
                tokens.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        tokens.append("".join(cur))
    return tokens


def write_argv_file(commands, path) -> None:
    Path(path).write_text(
        "".join(format_argv_line(c.argv) + "\n" for c in commands), encoding="utf-8"
    )


# --- seed corpus ---


@dataclass
class SeedCorpus:
    merged_dir: str
    minimized_dir: str
    per_command: dict
    merged_count: int
    minimized_count: int

    def to_dict(self) -> dict:
        return {
            "merged_dir": self.merged_dir,
            "minimized_dir": self.minimized_dir,
            "per_command": self.per_command,
            "merged_count": self.merged_count,
            "minimized_count": self.minimized_count,
        }


def _copy_dedup(sources, dest: Path) -> int:
    dest.mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    count = 0
    for src in sources:
        src = Path(src)
        if not src.is_file() or src.stat().st_size == 0:
            continue
        digest = hashlib.sha1(src.read_bytes()).hexdigest()
        if digest in seen:
            continue
        seen.add(digest)
        suffix = src.suffix if len(src.suffix) <= 8 else ""
        shutil.copyfile(src, dest / f"seed_{digest[:16]}{suffix}")
        count += 1
    return count


def build_corpus(program: str, commands, out_root, cmin_path=None,
                 target_path=None, timeout_s: float = 300.0) -> SeedCorpus:
    """Merge per-command seeds, minimize per command, union the results.

    With no minimizer configured the minimized set equals the merged set.
    A minimizer failure for one command falls back to that command's
    unminimized seeds with a warning.
    """
    out_root = Path(out_root)
    merged = out_root / "corpus_merged"
    minimized = out_root / "corpus"
    merged_count = _copy_dedup([c.seed_file for c in commands], merged)

    per_command: dict[str, dict] = {}
    if cmin_path is None:
        minimized.mkdir(parents=True, exist_ok=True)
        for f in merged.iterdir():
            shutil.copyfile(f, minimized / f.name)
        return SeedCorpus(str(merged), str(minimized), {}, merged_count, merged_count)

    union_sources: list[Path] = []
    for i, command in enumerate(commands):
        cmd_dir = out_root / f"cmin_{i:03d}"
        argv = [str(cmin_path), "-i", str(merged), "-o", str(cmd_dir), "--",
                str(target_path)] + list(command.argv[1:])
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=timeout_s)
            if proc.returncode != 0:
                raise RuntimeError(proc.stderr.decode(errors="replace")[:200])
            kept = [p for p in cmd_dir.iterdir() if p.is_file()]
        except (OSError, RuntimeError, subprocess.TimeoutExpired) as exc:
            log.warning("cmin failed for command %d (%s); using unminimized seeds", i, exc)
            kept = list(merged.iterdir())
        per_command[f"cmd_{i:03d}"] = {"kept": len(kept)}
        union_sources.extend(kept)

    minimized_count = _copy_dedup(union_sources, minimized)
    return SeedCorpus(str(merged), str(minimized), per_command, merged_count,
                      minimized_count)


# --- campaign ---


@dataclass
class CampaignConfig:
    fuzzer_path: str
    target_path: str
    duration_s: float
    repetitions: int = 1
    slots: int = 1
    output_root: str = "campaign_out"
    driver: str = "optionaware"  # or "plain"
    showmap_path: str | None = None
    triage_target_path: str | None = None  # sanitizer build; default target_path
    report_timeout_s: float = 10.0
    poll_interval_s: float = 0.5

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be > 0")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.driver not in ("optionaware", "plain"):
            raise ValueError(f"unknown driver: {self.driver}")


@dataclass
class CampaignResult:
    program: str
    commands: list = field(default_factory=list)  # per-command status dicts
    crashes: list = field(default_factory=list)  # crash artifact dicts
    coverage_maps: list = field(default_factory=list)
    events: list = field(default_factory=list)
    empty: bool = False

    def to_dict(self) -> dict:
        return {
            "program": self.program,
            "commands": self.commands,
            "crashes": self.crashes,
            "coverage_maps": self.coverage_maps,
            "empty": self.empty,
        }


class CampaignSupervisor:
    """Owns fuzzer child processes; one worker thread per slot."""

    def __init__(self, cfg: CampaignConfig, event_cb=None):
        self.cfg = cfg
        self._event_lock = threading.Lock()
        self._events: list[dict] = []
        self._event_cb = event_cb

    def _emit(self, kind: str, **data) -> None:
        event = {"event": kind, **data}
        with self._event_lock:
            self._events.append(event)
        if self._event_cb:
            self._event_cb(event)
        log.info("campaign event: %s", event)

    def run(self, program: str, commands, corpus_dir) -> CampaignResult:
        result = CampaignResult(program=program)
        if not commands:
            result.empty = True
            self._emit("campaign_empty", program=program)
            result.events = self._events
            return result

        for command in commands:
            if command.argv.count("@@") != 1:
                raise ValueError(f"command {command.origin} must contain exactly one @@")

        out_root = Path(self.cfg.output_root)
        out_root.mkdir(parents=True, exist_ok=True)

        # round-robin assignment of commands to slots; repetitions stay
        # sequential per command inside its slot
        slots: list[list[tuple[int, int]]] = [[] for _ in range(self.cfg.slots)]
        for i, _ in enumerate(commands):
            for rep in range(self.cfg.repetitions):
                slots[i % self.cfg.slots].append((i, rep))

        statuses = [
            {"command_id": f"cmd_{i:03d}", "origin": c.origin,
             "combination_ref": c.combination_ref, "argv": list(c.argv),
             "reps": [], "status": "launched"}
            for i, c in enumerate(commands)
        ]

        threads = []
        for slot_idx, jobs in enumerate(slots):
            if not jobs:
                continue
            t = threading.Thread(
                target=self._run_slot,
                args=(slot_idx, jobs, commands, statuses, corpus_dir, out_root, result),
                name=f"slot-{slot_idx}",
            )
            t.start()
            threads.append(t)
        for t in threads:
            t.join()

        for status in statuses:
            if any(r.get("failed") for r in status["reps"]):
                status["status"] = "failed"
        result.commands = statuses
        if self.cfg.showmap_path:
            self._collect_coverage(commands, corpus_dir, out_root, result)
        result.events = self._events
        return result

    def _run_slot(self, slot_idx, jobs, commands, statuses, corpus_dir, out_root, result):
        per_job = self.cfg.duration_s / max(1, len(jobs))
        for cmd_idx, rep in jobs:
            command = commands[cmd_idx]
            job_dir = out_root / f"cmd_{cmd_idx:03d}" / f"rep_{rep}"
            job_dir.mkdir(parents=True, exist_ok=True)
            rep_info = self._run_job(command, cmd_idx, rep, per_job, corpus_dir, job_dir)
            statuses[cmd_idx]["reps"].append(rep_info)
            for crash in rep_info.get("crashes", []):
                with self._event_lock:
                    result.crashes.append(crash)

    def _fuzzer_argv(self, command, corpus_dir, job_dir) -> list[str]:
        base = [str(self.cfg.fuzzer_path), "-i", str(corpus_dir), "-o", str(job_dir)]
        if self.cfg.driver == "optionaware":
            argv_file = job_dir / "argvs.txt"
            argv_file.write_text(format_argv_line(command.argv) + "\n", encoding="utf-8")
            return base + ["-F", str(argv_file), "--", str(self.cfg.target_path)]
        return base + ["--", str(self.cfg.target_path)] + list(command.argv[1:])

    def _run_job(self, command, cmd_idx, rep, duration, corpus_dir, job_dir) -> dict:
        self._emit("job_start", command=f"cmd_{cmd_idx:03d}", rep=rep,
                   duration_s=round(duration, 3))
        argv = self._fuzzer_argv(command, corpus_dir, job_dir)
        started = time.monotonic()
        try:
            proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                    cwd=job_dir)
        except OSError as exc:
            self._emit("job_failed", command=f"cmd_{cmd_idx:03d}", rep=rep, error=str(exc))
            return {"rep": rep, "failed": True, "stderr": str(exc), "crashes": []}

        deadline = started + duration
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                break
            time.sleep(min(self.cfg.poll_interval_s, max(0.01, deadline - time.monotonic())))
        if proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        _, stderr = proc.communicate()
        elapsed = time.monotonic() - started

        # startup failure: nonzero exit long before the time slice ended
        if proc.returncode not in (0, None, -15, -9) and elapsed < min(duration, 5):
            self._emit("job_failed", command=f"cmd_{cmd_idx:03d}", rep=rep,
                       error=stderr.decode(errors="replace")[:400])
            return {"rep": rep, "failed": True,
                    "stderr": stderr.decode(errors="replace")[:2000], "crashes": []}

        crashes = self._collect_crashes(command, cmd_idx, rep, job_dir)
        stats = self._read_stats(job_dir)
        self._emit("job_done", command=f"cmd_{cmd_idx:03d}", rep=rep,
                   crashes=len(crashes))
        return {"rep": rep, "failed": False, "outdir": str(job_dir),
                "stats": stats, "crashes": crashes}

    @staticmethod
    def _read_stats(job_dir) -> dict:
        stats_file = Path(job_dir) / "fuzzer_stats"
        stats: dict[str, str] = {}
        if stats_file.is_file():
            for line in stats_file.read_text(errors="replace").splitlines():
                if ":" in line:
                    key, value = line.split(":", 1)
                    stats[key.strip()] = value.strip()
        return stats

    def _collect_crashes(self, command, cmd_idx, rep, job_dir) -> list[dict]:
        crash_dir = Path(job_dir) / "crashes"
        artifacts = []
        if not crash_dir.is_dir():
            return artifacts
        store = Path(self.cfg.output_root) / "artifacts" / f"cmd_{cmd_idx:03d}" / f"rep_{rep}"
        store.mkdir(parents=True, exist_ok=True)
        for k, crash in enumerate(sorted(crash_dir.iterdir())):
            if not crash.is_file() or crash.name == "README.txt":
                continue
            saved_input = store / f"crash_{k:04d}.input"
            shutil.copyfile(crash, saved_input)
            report_text = self._capture_report(command, crash)
            report_path = store / f"crash_{k:04d}.report"
            report_path.write_text(report_text, encoding="utf-8")
            artifacts.append({
                "command_id": f"cmd_{cmd_idx:03d}",
                "combination_ref": command.combination_ref,
                "rep": rep,
                "input": str(saved_input),
                "report": str(report_path),
            })
        return artifacts

    def _capture_report(self, command, crash_input) -> str:
        """Re-run the sanitizer build on the crashing input to capture its
        report from stderr."""
        triage_target = self.cfg.triage_target_path or self.cfg.target_path
        argv = [str(triage_target)] + [
            str(crash_input) if t == "@@" else t for t in command.argv[1:]
        ]
        try:
            proc = subprocess.run(argv, capture_output=True,
                                  timeout=self.cfg.report_timeout_s)
            return proc.stderr.decode(errors="replace")
        except (OSError, subprocess.TimeoutExpired) as exc:
            return f"<report capture failed: {exc}>"

    def _collect_coverage(self, commands, corpus_dir, out_root, result) -> None:
        maps_dir = out_root / "coverage"
        maps_dir.mkdir(parents=True, exist_ok=True)
        for i, command in enumerate(commands):
            map_file = maps_dir / f"cmd_{i:03d}.map"
            argv = [str(self.cfg.showmap_path), "-i", str(corpus_dir),
                    "-o", str(map_file), "--", str(self.cfg.target_path)] \
                + list(command.argv[1:])
            try:
                subprocess.run(argv, capture_output=True, timeout=120)
                if map_file.exists():
                    result.coverage_maps.append(str(map_file))
            except (OSError, subprocess.TimeoutExpired) as exc:
                log.warning("showmap failed for cmd_%03d: %s", i, exc)


def launch_campaign(cfg: CampaignConfig, program: str, commands, corpus_dir,
                    event_cb=None) -> CampaignResult:
    supervisor = CampaignSupervisor(cfg, event_cb=event_cb)
    result = supervisor.run(program, commands, corpus_dir)
    out = Path(cfg.output_root)
    out.mkdir(parents=True, exist_ok=True)
    jsonio.dump(result.to_dict(), out / "campaign.json")
    return result
