"""Prompt construction, provider access and response parsing."""

from .prompts import (
    ChatRequest,
    QuestionPair,
    REFORMAT_INSTRUCTION,
    build_multivariate_prompt,
    build_question_prompt,
    build_univariate_prompt,
    templates_hash,
)
from .providers import (
    ChatResponse,
    HttpProvider,
    MockBank,
    MockProvider,
    ProviderConfig,
    ProviderError,
    complete,
    complete_many,
    make_provider,
)
from .responses import QuestionFormatError, parse_candidates, parse_questions

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "HttpProvider",
    "MockBank",
    "MockProvider",
    "ProviderConfig",
    "ProviderError",
    "QuestionFormatError",
    "QuestionPair",
    "REFORMAT_INSTRUCTION",
    "build_multivariate_prompt",
    "build_question_prompt",
    "build_univariate_prompt",
    "complete",
    "complete_many",
    "make_provider",
    "parse_candidates",
    "parse_questions",
    "templates_hash",
]
