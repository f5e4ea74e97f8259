"""Canonical JSON helpers.

Every artifact the pipeline writes (ProgramDoc, constraints, predictions,
drafts, reports) goes through these so that two runs over the same inputs
produce byte-identical files.
"""

import json
from pathlib import Path


def dumps(obj) -> str:
    """Serialize with stable key order and UTF-8 text, trailing newline."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def dump(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def loads(text: str):
    return json.loads(text)


def load(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
