"""Provider-agnostic LLM access.

Every prompt in the pipeline flows through LlmGateway.complete(), which
handles sampling parameters, record/replay cassettes, bounded retry, cost
accounting, and an in-flight cap. No other module performs network I/O.

Cassette fingerprints cover (stage, messages, temperature, n) but never the
session id or the clock, so "fresh session per evaluation" shows up as
ordered multi-entry lists in the cassette: the k-th identical request
consumes the k-th recorded response.
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from pathlib import Path

import httpx

from .errors import BudgetExceeded, CassetteMiss, ProviderError, UnparseableOutput

log = logging.getLogger(__name__)


class StageTag(str, Enum):
    SPLIT = "split"
    EXTRACT = "extract"
    SELFCHECK = "selfcheck"
    FEWSHOT = "fewshot"
    PREDICT = "predict"
    ASSEMBLE = "assemble"
    FILEGEN = "filegen"
    SUMMARIZE = "summarize"


# 0.7 for stages needing diverse outcomes, 0.2 for the precision stage.
DEFAULT_TEMPERATURES: dict[StageTag, float] = {
    stage: (0.2 if stage is StageTag.SELFCHECK else 0.7) for stage in StageTag
}


def fresh_session_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class LlmRequest:
    stage: StageTag
    messages: tuple[tuple[str, str], ...]  # (role, text)
    temperature: float
    n_samples: int = 1
    session_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature out of range: {self.temperature}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "stage": self.stage.value,
                "messages": [list(m) for m in self.messages],
                "temperature": self.temperature,
                "n": self.n_samples,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def digest(self) -> str:
        """Short human-readable label for cassette records."""
        last = self.messages[-1][1] if self.messages else ""
        return f"{self.stage.value}: " + re.sub(r"\s+", " ", last)[:160]


def make_request(stage: StageTag, messages, *, n_samples: int = 1,
                 temperature: float | None = None, session_id: str = "") -> LlmRequest:
    """Build a request with the stage's default temperature unless overridden."""
    if temperature is None:
        temperature = DEFAULT_TEMPERATURES[stage]
    if stage is StageTag.SELFCHECK and not session_id:
        session_id = fresh_session_id()
    return LlmRequest(
        stage=stage,
        messages=tuple((r, t) for r, t in messages),
        temperature=temperature,
        n_samples=n_samples,
        session_id=session_id,
    )


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    provider_id: str = ""

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    @property
    def token_usage(self) -> tuple[int, int]:
        return (self.prompt_tokens, self.completion_tokens)


# --- cost accounting ---


@dataclass
class LedgerEntry:
    stage: str
    program: str
    prompt_tokens: int
    completion_tokens: int
    cost: Decimal


class CostLedger:
    """Per-request cost records with per-program and per-stage totals.

    Prices are Decimal per 1000 tokens so totals are exact sums.
    """

    def __init__(self, prompt_price_per_1k: str | float = "0",
                 completion_price_per_1k: str | float = "0"):
        self.prompt_price = Decimal(str(prompt_price_per_1k))
        self.completion_price = Decimal(str(completion_price_per_1k))
        self.entries: list[LedgerEntry] = []
        self._lock = threading.Lock()
        self.program = ""

    def set_program(self, name: str) -> None:
        self.program = name

    def add(self, stage: str, prompt_tokens: int, completion_tokens: int) -> LedgerEntry:
        cost = (
            self.prompt_price * prompt_tokens + self.completion_price * completion_tokens
        ) / Decimal(1000)
        entry = LedgerEntry(stage, self.program, prompt_tokens, completion_tokens, cost)
        with self._lock:
            self.entries.append(entry)
        return entry

    @property
    def total(self) -> Decimal:
        with self._lock:
            return sum((e.cost for e in self.entries), Decimal(0))

    def report(self) -> dict:
        per_stage: dict[str, Decimal] = {}
        per_program: dict[str, Decimal] = {}
        with self._lock:
            entries = list(self.entries)
        for e in entries:
            per_stage[e.stage] = per_stage.get(e.stage, Decimal(0)) + e.cost
            per_program[e.program] = per_program.get(e.program, Decimal(0)) + e.cost
        total = sum((e.cost for e in entries), Decimal(0))
        n_prog = len([p for p in per_program if p]) or 1
        return {
            "total": str(total),
            "per_stage": {k: str(v) for k, v in sorted(per_stage.items())},
            "per_program": {k: str(v) for k, v in sorted(per_program.items())},
            "average_cost_per_program": str(total / n_prog),
            "requests": len(entries),
        }


# --- cassette ---


class CassetteMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


class Cassette:
    """JSON-lines store of recorded completions, keyed by request fingerprint.

    Append-only; repeated identical requests become repeated records for the
    same fingerprint and are consumed in order during replay.
    """

    def __init__(self, path, mode: CassetteMode):
        self.path = Path(path)
        self.mode = mode
        self.entries: dict[str, list[list[Completion]]] = {}
        self._cursors: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()
        elif mode is CassetteMode.REPLAY:
            raise CassetteMiss(f"cassette file not found: {self.path}")

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                completions = [
                    Completion(
                        text=c,
                        prompt_tokens=u[0],
                        completion_tokens=u[1],
                        provider_id="cassette",
                    )
                    for c, u in zip(rec["completions"], rec["usage"])
                ]
                self.entries.setdefault(rec["fingerprint"], []).append(completions)

    def replay(self, req: LlmRequest) -> list[Completion]:
        fp = req.fingerprint()
        with self._lock:
            responses = self.entries.get(fp)
            cursor = self._cursors.get(fp, 0)
            if not responses or cursor >= len(responses):
                raise CassetteMiss(f"no recorded response for {req.digest()!r} (fp {fp[:12]})")
            self._cursors[fp] = cursor + 1
            return responses[cursor]

    def record(self, req: LlmRequest, completions: list[Completion]) -> None:
        rec = {
            "fingerprint": req.fingerprint(),
            "stage_tag": req.stage.value,
            "request_digest": req.digest(),
            "completions": [c.text for c in completions],
            "usage": [[c.prompt_tokens, c.completion_tokens] for c in completions],
        }
        with self._lock:
            self.entries.setdefault(rec["fingerprint"], []).append(list(completions))
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    def rewind(self) -> None:
        with self._lock:
            self._cursors.clear()


# --- providers ---


class Provider:
    """Interface: turn one request into n completions."""

    name = "provider"

    def complete(self, req: LlmRequest) -> list[Completion]:  # pragma: no cover
        raise NotImplementedError


class OpenAICompatProvider(Provider):
    """Chat-completions provider for any OpenAI-compatible endpoint."""

    name = "openai-compat"

    def __init__(self, base_url: str, model: str, api_key_env: str = "PROPHET_API_KEY",
                 timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    def complete(self, req: LlmRequest) -> list[Completion]:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise ProviderError(f"no credential in ${self.api_key_env}")
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": t} for r, t in req.messages],
            "temperature": req.temperature,
            "n": req.n_samples,
        }
        try:
            resp = httpx.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.timeout_s,
            )
        except httpx.HTTPError as exc:
            raise ProviderError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise ProviderError(f"provider returned {resp.status_code}")
        if resp.status_code != 200:
            raise ProviderError(f"provider rejected request: {resp.status_code} {resp.text[:200]}")
        data = resp.json()
        usage = data.get("usage", {})
        prompt_tokens = int(usage.get("prompt_tokens", 0))
        completion_tokens = int(usage.get("completion_tokens", 0))
        choices = data.get("choices", [])
        per_choice = completion_tokens // max(1, len(choices))
        return [
            Completion(
                text=c["message"]["content"],
                prompt_tokens=prompt_tokens if i == 0 else 0,
                completion_tokens=per_choice,
                provider_id=self.model,
            )
            for i, c in enumerate(choices)
        ]


# --- gateway ---


@dataclass
class GatewayConfig:
    budget_cap: str | None = None  # currency as string, None = unlimited
    in_flight_cap: int = 4
    max_attempts: int = 3
    backoff_s: float = 0.5


class LlmGateway:
    def __init__(self, provider: Provider | None = None, cassette: Cassette | None = None,
                 ledger: CostLedger | None = None, config: GatewayConfig | None = None):
        self.provider = provider
        self.cassette = cassette
        self.ledger = ledger or CostLedger()
        self.config = config or GatewayConfig()
        self._slots = threading.Semaphore(self.config.in_flight_cap)
        if cassette is None and provider is None:
            raise ValueError("gateway needs a provider, a cassette, or both")
        if cassette and cassette.mode is CassetteMode.RECORD and provider is None:
            raise ValueError("record mode needs a live provider")

    @property
    def mode(self) -> CassetteMode:
        return self.cassette.mode if self.cassette else CassetteMode.PASSTHROUGH

    def complete(self, req: LlmRequest) -> list[Completion]:
        """Return exactly req.n_samples completions, accounting their cost.

        Raises BudgetExceeded before dispatch once the ledger total has
        reached the configured cap.
        """
        cap = self.config.budget_cap
        if cap is not None and self.ledger.total >= Decimal(str(cap)):
            raise BudgetExceeded(f"ledger total {self.ledger.total} reached cap {cap}")

        if self.mode is CassetteMode.REPLAY:
            completions = self.cassette.replay(req)
        else:
            completions = self._call_provider(req)
            if self.mode is CassetteMode.RECORD:
                self.cassette.record(req, completions)

        if len(completions) != req.n_samples:
            log.warning(
                "%s returned %d completions, expected %d",
                req.stage.value, len(completions), req.n_samples,
            )
        for c in completions:
            self.ledger.add(req.stage.value, c.prompt_tokens, c.completion_tokens)
        return completions

    def _call_provider(self, req: LlmRequest) -> list[Completion]:
        last: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                time.sleep(min(self.config.backoff_s * (2 ** (attempt - 1)), 8.0))
            try:
                with self._slots:
                    return self.provider.complete(req)
            except ProviderError as exc:
                last = exc
                log.warning("provider attempt %d failed: %s", attempt + 1, exc)
        raise ProviderError(f"gave up after {self.config.max_attempts} attempts: {last}")


# --- structured output parsing ---

_FENCE = re.compile(r"```(?:json|JSON)?\s*\n(.*?)```", re.DOTALL)
_TRAILING_COMMA = re.compile(r",\s*([}\]])")


def parse_structured(text: str, schema_tag: StageTag):
    """Extract the first JSON payload from a completion.

    Applies at most three mechanical repairs (code-fence stripping, payload
    extraction, trailing-comma removal) before giving up; aggressive repair
    risks fabricating content. The result is validated against the stage's
    expected shape.
    """
    candidates = [text.strip()]
    m = _FENCE.search(text)
    if m:
        candidates.append(m.group(1).strip())
    for candidate in list(candidates):
        span = _first_json_span(candidate)
        if span and span != candidate:
            candidates.append(span)
    for candidate in list(candidates):
        stripped = _TRAILING_COMMA.sub(r"\1", candidate)
        if stripped != candidate:
            candidates.append(stripped)

    for candidate in candidates:
        try:
            payload = json.loads(candidate)
        except (json.JSONDecodeError, ValueError):
            continue
        return _validate_payload(payload, schema_tag)
    raise UnparseableOutput(schema_tag.value, text[:120])


def _first_json_span(text: str) -> str | None:
    """Locate the first balanced {...} or [...] region, string-aware."""
    start = None
    for i, ch in enumerate(text):
        if ch in "{[":
            start = i
            break
    if start is None:
        return None
    opener, closer = text[start], {"{": "}", "[": "]"}[text[start]]
    depth = 0
    in_str = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == opener:
            depth += 1
        elif ch == closer:
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def _validate_payload(payload, schema_tag: StageTag):
    """Structural check per stage; returns the payload, normalized lightly."""
    tag = schema_tag
    if tag is StageTag.SPLIT:
        if isinstance(payload, dict):
            payload = payload.get("options", payload.get("entries"))
        if not isinstance(payload, list) or not all(
            isinstance(e, dict) and isinstance(e.get("keys"), list) for e in payload
        ):
            raise UnparseableOutput(tag.value, "expected a list of {keys, description}")
        return payload
    if tag is StageTag.EXTRACT:
        if not isinstance(payload, dict):
            raise UnparseableOutput(tag.value, "expected an object")
        conflicts = payload.get("conflicts", [])
        dependencies = payload.get("dependencies", [])
        if not isinstance(conflicts, list) or not isinstance(dependencies, list):
            raise UnparseableOutput(tag.value, "conflicts/dependencies must be lists")
        return {"conflicts": conflicts, "dependencies": dependencies}
    if tag is StageTag.SELFCHECK:
        if not isinstance(payload, dict) or "verification" not in payload or \
                "counterexample" not in payload:
            raise UnparseableOutput(tag.value, "expected verification/counterexample answers")
        return payload
    if tag in (StageTag.PREDICT, StageTag.FEWSHOT):
        if isinstance(payload, dict):
            payload = payload.get("combinations", payload.get("high_risk_combinations"))
        if not isinstance(payload, list) or not all(
            isinstance(e, dict) and isinstance(e.get("options"), list) for e in payload
        ):
            raise UnparseableOutput(tag.value, "expected a list of {options,...}")
        return payload
    if tag is StageTag.ASSEMBLE:
        if isinstance(payload, dict) and "argv" in payload:
            if not isinstance(payload["argv"], list):
                raise UnparseableOutput(tag.value, "argv must be a list")
            return payload
        if isinstance(payload, dict) and "value_options" in payload:
            if not isinstance(payload["value_options"], list):
                raise UnparseableOutput(tag.value, "value_options must be a list")
            return payload
        raise UnparseableOutput(tag.value, "expected argv or value_options")
    if tag is StageTag.FILEGEN:
        if isinstance(payload, dict) and isinstance(payload.get("script"), str):
            return payload
        raise UnparseableOutput(tag.value, "expected {script: ...}")
    if tag is StageTag.SUMMARIZE:
        if isinstance(payload, dict):
            payload = payload.get("ranking", payload.get("categories"))
        if not isinstance(payload, list):
            raise UnparseableOutput(tag.value, "expected a ranked list")
        return payload
    raise UnparseableOutput(tag.value, f"no schema for stage {tag}")
