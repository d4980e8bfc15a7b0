"""Prompt builders for the three prompt families.

Builders take only schema metadata and task text; they never see a patient
record. Output is a pure function of the inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

from ..cohort import Schema, VariableMeta
from ..featscript import BUILTIN_DOCS, GRAMMAR
from ..tools import MULTIVARIATE_TOOLS, UNIVARIATE_TOOLS, tool_docs

DEFAULT_MODEL = "gemini-2.0-flash"


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = 1.0
    n_samples: int = 1
    max_tokens: int = 2048
    model_name: str = DEFAULT_MODEL
    # routing hints for the mock provider; never sent over the wire
    tags: Mapping[str, object] = field(default_factory=dict, compare=False)
    nonce: int = 0

    def __post_init__(self):
        if not self.system_text.strip() or not self.user_text.strip():
            raise ValueError("prompt texts must be nonempty")
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.n_samples < 1 or self.max_tokens < 1:
            raise ValueError("n_samples and max_tokens must be positive")
        object.__setattr__(self, "tags", MappingProxyType(dict(self.tags)))

    @property
    def prompt_hash(self) -> str:
        blob = json.dumps([self.model_name, self.system_text, self.user_text], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text},
        ]

    def with_appended(self, text: str, **tags) -> "ChatRequest":
        return ChatRequest(
            self.system_text,
            self.user_text + "\n\n" + text,
            self.temperature,
            self.n_samples,
            self.max_tokens,
            self.model_name,
            {**self.tags, **tags},
            self.nonce,
        )


@dataclass(frozen=True)
class QuestionPair:
    question: str
    variables: tuple[str, ...]
    rationale: str = ""

    def __post_init__(self):
        if not self.variables:
            raise ValueError("a question needs at least one variable")
        object.__setattr__(self, "variables", tuple(dict.fromkeys(self.variables)))


SYSTEM_FEATURES = """\
You are a clinical data scientist. You write feature-extraction programs for \
irregularly sampled patient time series in FeatScript, a small side-effect-free \
expression language. Each program reads one patient's measurements through the \
listed tools and must return a single number (or NA when the feature cannot be \
computed). Measurements are irregular and often sparse: guard against empty \
series and missing values instead of assuming regular sampling."""

SYSTEM_QUESTIONS = """\
You are a clinical expert helping to design predictive features. You only see \
the dataset schema and summary statistics, never patient data."""

FEATURE_INSTRUCTIONS = """\
Write exactly {B} different FeatScript programs. Put each program in its own \
fenced code block that starts with ```featscript and ends with ```. Use only \
the variables and tools listed above. Do not write anything inside the blocks \
except the program (comments starting with # are allowed)."""

QUESTION_INSTRUCTIONS = """\
Propose exactly {n_q} clinically relevant questions whose answers, computed \
from a patient's measurements, would help with the task. Each question must \
combine at least two of the variables above. Answer with {n_q} records in \
exactly this key-value format, separated by blank lines:

QUESTION: <one-sentence question>
VARIABLES: <comma-separated variable names from the list above>
RATIONALE: <one sentence on clinical relevance>"""

REFORMAT_INSTRUCTION = """\
Your previous answer could not be parsed. Reply again using only records of \
the form QUESTION: ... / VARIABLES: ... / RATIONALE: ..., separated by blank lines."""

TEMPLATES = {
    "system_features": SYSTEM_FEATURES,
    "system_questions": SYSTEM_QUESTIONS,
    "feature_instructions": FEATURE_INSTRUCTIONS,
    "question_instructions": QUESTION_INSTRUCTIONS,
    "reformat_instruction": REFORMAT_INSTRUCTION,
}


def templates_hash() -> str:
    blob = json.dumps({**TEMPLATES, "grammar": GRAMMAR, "builtins": BUILTIN_DOCS}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _num(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def describe_variable(meta: VariableMeta) -> str:
    stats = ", ".join(f"{k}={_num(v)}" for k, v in meta.stats.items())
    unit = meta.unit or "unspecified"
    return f"{meta.name} (unit: {unit}): {stats}"


def _language_section(tools: Sequence[str]) -> str:
    return (
        f"Tools ({len(tools)}):\n{tool_docs(tools)}\n\n"
        f"Builtins:\n{BUILTIN_DOCS}\n"
        f"Grammar (EBNF):\n{GRAMMAR}"
    )


def build_univariate_prompt(
    task_description: str,
    variable_meta: VariableMeta,
    B: int = 5,
    tools: Sequence[str] = UNIVARIATE_TOOLS,
    temperature: float = 1.0,
    model_name: str = DEFAULT_MODEL,
    max_tokens: int = 2048,
) -> ChatRequest:
    user = (
        f"Prediction task: {task_description}\n\n"
        f"Variable:\n{describe_variable(variable_meta)}\n\n"
        f"{_language_section(tools)}\n"
        f"Each program must use only the variable {variable_meta.name}.\n"
        + FEATURE_INSTRUCTIONS.format(B=B)
    )
    tags = {"family": "univariate", "variable": variable_meta.name, "B": B}
    return ChatRequest(SYSTEM_FEATURES, user, temperature, 1, max_tokens, model_name, tags)


def build_question_prompt(
    task_description: str,
    schema: Schema,
    n_q: int = 20,
    temperature: float = 1.0,
    model_name: str = DEFAULT_MODEL,
    max_tokens: int = 4096,
) -> ChatRequest:
    if n_q < 1:
        raise ValueError("n_q must be at least 1")
    listing = "\n".join(f"- {describe_variable(v)}" for v in schema.variables)
    user = (
        f"Prediction task: {task_description}\n\n"
        f"Available time-series variables ({len(schema.variables)}):\n{listing}\n\n"
        + QUESTION_INSTRUCTIONS.format(n_q=n_q)
    )
    tags = {"family": "question", "n_q": n_q}
    return ChatRequest(SYSTEM_QUESTIONS, user, temperature, 1, max_tokens, model_name, tags)


def build_multivariate_prompt(
    task_description: str,
    question_pair: QuestionPair,
    variable_metas: Sequence[VariableMeta],
    B: int = 5,
    tools: Sequence[str] = MULTIVARIATE_TOOLS,
    temperature: float = 1.0,
    model_name: str = DEFAULT_MODEL,
    max_tokens: int = 2048,
) -> ChatRequest:
    by_name = {m.name: m for m in variable_metas}
    missing = [v for v in question_pair.variables if v not in by_name]
    if missing:
        raise ValueError(f"no metadata for variables: {', '.join(missing)}")
    listing = "\n".join(f"- {describe_variable(by_name[v])}" for v in question_pair.variables)
    user = (
        f"Prediction task: {task_description}\n\n"
        f"Clinical question: {question_pair.question}\n\n"
        f"Variables needed ({len(question_pair.variables)}):\n{listing}\n\n"
        f"{_language_section(tools)}\n"
        f"Each program must answer the question using only: {', '.join(question_pair.variables)}.\n"
        + FEATURE_INSTRUCTIONS.format(B=B)
    )
    tags = {"family": "multivariate", "question": question_pair.question, "variables": question_pair.variables, "B": B}
    return ChatRequest(SYSTEM_FEATURES, user, temperature, 1, max_tokens, model_name, tags)
