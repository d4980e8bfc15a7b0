"""Multi-round univariate and question-driven multivariate program generation.

Each prompt yields up to ``B`` candidates that pass through parse, static
validation against the allowed variable set, and a smoke test on a fixed
training sample. Every candidate is kept in the registry with its status.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cohort import Cohort, PatientRecord, Schema, restrict
from .featscript import (
    DEFAULT_BUDGET,
    GRAMMAR_VERSION,
    BudgetExceeded,
    EvalBudget,
    FeatScriptRuntimeError,
    FeatScriptSyntaxError,
    check,
    evaluate,
    parse,
    pretty_print,
)
from .llm import (
    REFORMAT_INSTRUCTION,
    ChatResponse,
    QuestionFormatError,
    build_multivariate_prompt,
    build_question_prompt,
    build_univariate_prompt,
    complete_many,
    parse_candidates,
    parse_questions,
    templates_hash,
)
from .llm.prompts import DEFAULT_MODEL
from .tools import MULTIVARIATE_TOOLS, NA, UNIVARIATE_TOOLS, tool_docs

log = logging.getLogger(__name__)

UNIVARIATE, MULTIVARIATE = "univariate", "multivariate"
STATUSES = ("valid", "syntax_rejected", "validation_rejected", "smoke_rejected")
MODES = ("uni", "multi", "both")


@dataclass(frozen=True)
class GenConfig:
    B: int = 5
    n_q: int = 20
    n_r: int = 5
    temperature: float = 1.0
    smoke_sample_size: int = 32
    seed: int = 0
    model_name: str = DEFAULT_MODEL
    max_in_flight: int = 4

    def __post_init__(self):
        for name in ("B", "n_q", "n_r", "smoke_sample_size", "max_in_flight"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must be in [0, 2]")


def program_id(canonical: str, kind: str, variables: Sequence[str]) -> str:
    blob = json.dumps([canonical, kind, sorted(variables)], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureProgram:
    id: str
    kind: str
    source_canonical: str
    variables: tuple[str, ...]
    round_index: int
    prompt_hash: str
    validation_status: str
    candidate_index: int = 0
    question: str | None = None
    reason: str = ""

    @property
    def is_valid(self) -> bool:
        return self.validation_status == "valid"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variables"] = list(self.variables)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureProgram":
        return cls(**{**d, "variables": tuple(d["variables"])})


@dataclass
class FeatureRegistry:
    programs: list[FeatureProgram] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def valid(self) -> list[FeatureProgram]:
        return [p for p in self.programs if p.is_valid]

    def status_counts(self, kind: str | None = None) -> dict[str, int]:
        c = Counter(p.validation_status for p in self.programs if kind is None or p.kind == kind)
        return {s: c.get(s, 0) for s in STATUSES}

    def subset(self, keep) -> "FeatureRegistry":
        keep_ids = {p.id for p in keep}
        return FeatureRegistry([p for p in self.programs if p.id in keep_ids], dict(self.manifest))

    def to_dict(self) -> dict:
        return {"manifest": self.manifest, "programs": [p.to_dict() for p in self.programs]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureRegistry":
        return cls([FeatureProgram.from_dict(p) for p in d["programs"]], dict(d.get("manifest", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureRegistry":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- smoke test


@dataclass(frozen=True)
class SmokeResult:
    passed: bool
    reason: str = ""
    n_errors: int = 0
    n_na: int = 0

    def __bool__(self):
        return self.passed


def smoke_sample(cohort: Cohort, size: int, seed: int) -> list[PatientRecord]:
    """Seeded subset of (training) records, in cohort order."""
    n = len(cohort.records)
    if n <= size:
        return list(cohort.records)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
    return [cohort.records[i] for i in idx]


def smoke_test(program, sample_records: Sequence[PatientRecord], variables=None, budget: EvalBudget = DEFAULT_BUDGET) -> SmokeResult:
    """Pass iff no budget overrun, at most half runtime errors, and one non-NA result."""
    if not sample_records:
        return SmokeResult(False, "empty smoke sample")
    variables = program.declared_variables if variables is None else variables
    errors = nas = 0
    for record in sample_records:
        try:
            value = evaluate(program, restrict(record, variables), budget)
        except BudgetExceeded as exc:
            return SmokeResult(False, f"budget exceeded: {exc.reason}", errors + 1, nas)
        except FeatScriptRuntimeError:
            errors += 1
            continue
        if value is NA:
            nas += 1
    n = len(sample_records)
    if errors / n > 0.5:
        return SmokeResult(False, f"runtime errors on {errors}/{n} records", errors, nas)
    if errors + nas == n:
        return SmokeResult(False, "all-NA", errors, nas)
    return SmokeResult(True, "", errors, nas)


# ---------------------------------------------------------------- candidates


def _screen(
    source: str,
    allowed: Sequence[str],
    schema: Schema,
    smoke_records,
    budget: EvalBudget,
) -> tuple[str, str, str, tuple[str, ...]]:
    """-> (status, canonical source, reason, id variables)."""
    variables = tuple(allowed)
    try:
        program = parse(source)
    except FeatScriptSyntaxError as exc:
        return "syntax_rejected", source.strip(), str(exc), variables
    canonical = pretty_print(program)
    issues = check(program, schema, allowed, require_variable=True)
    if issues:
        return "validation_rejected", canonical, "; ".join(str(i) for i in issues), variables
    result = smoke_test(program, smoke_records, allowed, budget)
    if not result:
        return "smoke_rejected", canonical, result.reason, variables
    return "valid", canonical, "", variables


def _tally_usage(stats: Counter, response) -> None:
    meta = getattr(response, "provider_metadata", {}) or {}
    for key in ("prompt_tokens", "completion_tokens"):
        if isinstance(meta.get(key), (int, float)):
            stats[key] += int(meta[key])


def _candidates_from(
    response,
    request,
    kind: str,
    allowed: Sequence[str],
    round_index: int,
    schema: Schema,
    config: GenConfig,
    smoke_records,
    budget: EvalBudget,
    stats: Counter,
    question: str | None = None,
) -> list[FeatureProgram]:
    if not isinstance(response, ChatResponse):
        stats["prompts_failed"] += 1
        log.warning("round %d %s prompt %s skipped: %s", round_index, kind, request.prompt_hash, response)
        return []
    _tally_usage(stats, response)
    sources = parse_candidates(response.completions[0] if response.completions else "", config.B)
    out = []
    for j, src in enumerate(sources):
        status, canonical, reason, variables = _screen(src, allowed, schema, smoke_records, budget)
        stats[f"{kind}:{status}"] += 1
        out.append(
            FeatureProgram(
                id=program_id(canonical, kind, variables),
                kind=kind,
                source_canonical=canonical,
                variables=variables,
                round_index=round_index,
                prompt_hash=request.prompt_hash,
                validation_status=status,
                candidate_index=j,
                question=question,
                reason=reason,
            )
        )
    return out


def generate_univariate(
    schema: Schema,
    task: str,
    config: GenConfig,
    provider,
    smoke_records: Sequence[PatientRecord],
    budget: EvalBudget = DEFAULT_BUDGET,
) -> FeatureRegistry:
    if not schema.variables:
        raise ValueError("univariate generation needs a nonempty schema")
    stats: Counter = Counter()
    programs: list[FeatureProgram] = []
    for r in range(1, config.n_r + 1):
        requests = [
            replace(
                build_univariate_prompt(task, meta, config.B, UNIVARIATE_TOOLS, config.temperature, config.model_name),
                nonce=r,
            )
            for meta in schema.variables
        ]
        stats["prompts"] += len(requests)
        responses = complete_many(provider, requests, config.max_in_flight)
        for meta, req, resp in zip(schema.variables, requests, responses):
            programs += _candidates_from(resp, req, UNIVARIATE, (meta.name,), r, schema, config, smoke_records, budget, stats)
        log.info("univariate round %d: %d candidates so far, %d valid", r, len(programs), sum(p.is_valid for p in programs))
    return FeatureRegistry(programs, {"stats": dict(sorted(stats.items()))})


def _questions_for_round(schema, task, config, provider, r, stats):
    request = replace(build_question_prompt(task, schema, config.n_q, config.temperature, config.model_name), nonce=r)
    for attempt in (1, 2):
        stats["prompts"] += 1
        response = complete_many(provider, [request], 1)[0]
        if not isinstance(response, ChatResponse):
            stats["prompts_failed"] += 1
            log.warning("round %d question prompt failed: %s", r, response)
            return []
        _tally_usage(stats, response)
        try:
            pairs = parse_questions(response.completions[0], schema)
        except QuestionFormatError:
            stats["question_format_errors"] += 1
            if attempt == 1:
                request = request.with_appended(REFORMAT_INSTRUCTION, attempt=2)
                continue
            log.warning("round %d: question block unparseable after retry; round skipped", r)
            return []
        return pairs[: config.n_q]
    return []


def generate_multivariate(
    schema: Schema,
    task: str,
    config: GenConfig,
    provider,
    smoke_records: Sequence[PatientRecord],
    budget: EvalBudget = DEFAULT_BUDGET,
) -> FeatureRegistry:
    if len(schema.variables) < 2:
        raise ValueError("multivariate generation needs at least 2 schema variables")
    stats: Counter = Counter()
    programs: list[FeatureProgram] = []
    for r in range(1, config.n_r + 1):
        pairs = _questions_for_round(schema, task, config, provider, r, stats)
        stats["questions"] += len(pairs)
        if not pairs:
            log.warning("round %d contributed no questions", r)
            continue
        requests = [
            replace(
                build_multivariate_prompt(
                    task,
                    pair,
                    [schema[v] for v in pair.variables],
                    config.B,
                    MULTIVARIATE_TOOLS,
                    config.temperature,
                    config.model_name,
                ),
                nonce=r,
            )
            for pair in pairs
        ]
        stats["prompts"] += len(requests)
        responses = complete_many(provider, requests, config.max_in_flight)
        for pair, req, resp in zip(pairs, requests, responses):
            programs += _candidates_from(
                resp, req, MULTIVARIATE, pair.variables, r, schema, config, smoke_records, budget, stats, pair.question
            )
        log.info("multivariate round %d: %d questions, %d candidates so far", r, len(pairs), len(programs))
    return FeatureRegistry(programs, {"stats": dict(sorted(stats.items()))})


def dedup(registry: FeatureRegistry) -> tuple[FeatureRegistry, int]:
    """Collapse programs with equal ids, keeping the first (earliest-round) entry."""
    seen: set[str] = set()
    kept = []
    for p in registry.programs:
        if p.id in seen:
            continue
        seen.add(p.id)
        kept.append(p)
    return FeatureRegistry(kept, dict(registry.manifest)), len(registry.programs) - len(kept)


def run_generation(
    schema: Schema,
    task: str,
    config: GenConfig,
    provider,
    mode: str = "both",
    smoke_records: Sequence[PatientRecord] = (),
    budget: EvalBudget = DEFAULT_BUDGET,
) -> FeatureRegistry:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    parts: list[tuple[int, FeatureRegistry]] = []
    if mode in ("uni", "both"):
        parts.append((0, generate_univariate(schema, task, config, provider, smoke_records, budget)))
    if mode in ("multi", "both"):
        parts.append((1, generate_multivariate(schema, task, config, provider, smoke_records, budget)))
    ordered = sorted(
        ((p.round_index, rank, i, p) for rank, reg in parts for i, p in enumerate(reg.programs)),
        key=lambda t: t[:3],
    )
    merged, n_dup = dedup(FeatureRegistry([t[3] for t in ordered]))
    stats: Counter = Counter()
    for _, reg in parts:
        stats.update(reg.manifest.get("stats", {}))
    merged.manifest = {
        "config": asdict(config),
        "mode": mode,
        "task_description": task,
        "templates_hash": templates_hash(),
        "grammar_version": GRAMMAR_VERSION,
        "tool_docs": {"univariate": tool_docs(UNIVARIATE_TOOLS), "multivariate": tool_docs(MULTIVARIATE_TOOLS)},
        "provider": getattr(provider, "identity", type(provider).__name__),
        "budget": asdict(budget),
        "stats": dict(sorted(stats.items())),
        "duplicates_collapsed": n_dup,
        "status_counts": {
            UNIVARIATE: merged.status_counts(UNIVARIATE),
            MULTIVARIATE: merged.status_counts(MULTIVARIATE),
        },
    }
    log.info(
        "generation done: %d programs (%d valid), %d duplicates collapsed",
        len(merged.programs),
        len(merged.valid()),
        n_dup,
    )
    return merged
