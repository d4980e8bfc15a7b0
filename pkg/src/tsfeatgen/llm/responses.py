"""Extract candidate programs and question records from completion text."""

from __future__ import annotations

import logging
import re

from ..cohort import Schema
from .prompts import QuestionPair

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_KEY = re.compile(r"^\s*(?:[-*]\s*|\d+[.)]\s*)?\**(QUESTION|VARIABLES|RATIONALE)\**\s*:\s*(.*)$", re.IGNORECASE)


class QuestionFormatError(ValueError):
    """Completion text contained no parseable question record."""


def parse_candidates(completion_text: str, B: int) -> list[str]:
    """Fenced code blocks in order of appearance, at most ``B`` of them."""
    blocks = [m.group(1).strip() for m in _FENCE.finditer(completion_text or "")]
    blocks = [b for b in blocks if b]
    if len(blocks) < B:
        log.info("completion held %d program block(s); %d requested", len(blocks), B)
    return blocks[:B]


def normalize_question(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().rstrip("?.!").strip().casefold()


def _split_variables(text: str) -> list[str]:
    text = text.strip().strip("[]")
    parts = re.split(r"[,;]", text)
    return [p.strip().strip("`'\"").strip() for p in parts if p.strip().strip("`'\"").strip()]


def parse_questions(completion_text: str, schema: Schema) -> list[QuestionPair]:
    """Parse ``QUESTION / VARIABLES / RATIONALE`` records.

    Records naming variables outside the schema are dropped; duplicate
    questions (after whitespace/case normalization) are collapsed. Raises
    QuestionFormatError when nonempty text holds no complete record.
    """
    if not completion_text or not completion_text.strip():
        return []
    records: list[dict[str, str]] = []
    current: dict[str, str] | None = None
    last_key = None
    for line in completion_text.splitlines():
        if line.strip().startswith("```"):
            continue
        m = _KEY.match(line)
        if m:
            key, value = m.group(1).lower(), m.group(2).strip()
            if key == "question":
                current = {"question": value}
                records.append(current)
            elif current is not None:
                current[key] = value
            last_key = key
        elif line.strip() and current is not None and last_key in ("question", "rationale"):
            current[last_key] = (current.get(last_key, "") + " " + line.strip()).strip()
        elif not line.strip():
            last_key = None
    complete = [r for r in records if r.get("question") and r.get("variables")]
    if not complete:
        raise QuestionFormatError("no QUESTION/VARIABLES records found")

    names = set(schema.names)
    seen: set[str] = set()
    pairs: list[QuestionPair] = []
    for r in complete:
        variables = _split_variables(r["variables"])
        unknown = [v for v in variables if v not in names]
        if unknown or not variables:
            log.info("dropping question %r: unknown variables %s", r["question"], unknown)
            continue
        key = normalize_question(r["question"])
        if key in seen:
            log.info("dropping duplicate question %r", r["question"])
            continue
        seen.add(key)
        pairs.append(QuestionPair(r["question"], tuple(variables), r.get("rationale", "")))
    return pairs
