"""Chat-completion providers: an OpenAI-style HTTP client and a seeded mock."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .prompts import ChatRequest

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChatResponse:
    completions: tuple[str, ...]
    provider_metadata: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class MockBank:
    """Programs and questions the mock provider samples from.

    ``univariate`` and ``multivariate`` map a variable name (resp. a question
    text or a comma-joined variable list) to candidate sources. Sources may use
    ``{var}`` / ``{v0}``, ``{v1}``... placeholders, filled from the prompt.
    ``question_responses`` overrides the question completion per attempt.
    """

    univariate: Mapping[str, Sequence[str]] = field(default_factory=dict)
    multivariate: Mapping[str, Sequence[str]] = field(default_factory=dict)
    questions: Sequence[Mapping[str, object]] = ()
    default_univariate: Sequence[str] = ()
    default_multivariate: Sequence[str] = ()
    question_responses: Sequence[str] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "MockBank":
        return cls(
            univariate={k: list(v) for k, v in d.get("univariate", {}).items()},
            multivariate={k: list(v) for k, v in d.get("multivariate", {}).items()},
            questions=[dict(q) for q in d.get("questions", [])],
            default_univariate=list(d.get("default_univariate", [])),
            default_multivariate=list(d.get("default_multivariate", [])),
            question_responses=list(d.get("question_responses", [])),
        )

    @classmethod
    def load(cls, path) -> "MockBank":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "univariate": {k: list(v) for k, v in self.univariate.items()},
            "multivariate": {k: list(v) for k, v in self.multivariate.items()},
            "questions": [dict(q) for q in self.questions],
            "default_univariate": list(self.default_univariate),
            "default_multivariate": list(self.default_multivariate),
            "question_responses": list(self.question_responses),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"  # "http" or "mock"
    endpoint: str | None = None
    model: str = "gemini-2.0-flash"
    token_env: str | None = None
    max_retries: int = 3
    backoff: float = 1.0
    backoff_max: float = 30.0
    timeout: float = 120.0
    mock_seed: int | None = 0
    mock_bank: MockBank | None = None
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("http", "mock"):
            raise ValueError(f"provider kind must be 'http' or 'mock', got {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http provider requires an endpoint")
        if self.kind == "mock" and self.mock_seed is None:
            raise ValueError("mock provider requires a seed")
        if self.max_in_flight < 1 or self.max_retries < 0:
            raise ValueError("max_in_flight must be >= 1 and max_retries >= 0")


def _fence(sources: Sequence[str]) -> str:
    parts = ["Here are the feature programs."]
    for i, src in enumerate(sources, 1):
        parts.append(f"Program {i}:\n```featscript\n{src}\n```")
    return "\n\n".join(parts) + "\n"


def _fill(template: str, variables: Sequence[str]) -> str:
    out = template
    if variables:
        out = out.replace("{var}", variables[0])
    for i, v in enumerate(variables):
        out = out.replace(f"{{v{i}}}", v)
    return out


def format_questions(questions: Sequence[Mapping[str, object]]) -> str:
    blocks = []
    for q in questions:
        variables = q["variables"]
        if not isinstance(variables, str):
            variables = ", ".join(variables)
        blocks.append(f"QUESTION: {q['question']}\nVARIABLES: {variables}\nRATIONALE: {q.get('rationale', '')}")
    return "\n\n".join(blocks) + "\n"


class MockProvider:
    """Deterministic stand-in for an LLM: ``(seed, request) -> completions``."""

    def __init__(self, bank: MockBank, seed: int = 0):
        self.bank = bank
        self.seed = seed

    @property
    def identity(self) -> str:
        return f"mock:seed={self.seed}:bank={self.bank.digest()}"

    def _rng(self, request: ChatRequest, sample: int) -> np.random.Generator:
        h = int(request.prompt_hash, 16)
        return np.random.default_rng([self.seed, h, request.nonce, sample])

    def _choose(self, pool: Sequence, k: int, rng: np.random.Generator) -> list:
        if not pool:
            return []
        order = rng.permutation(len(pool))
        return [pool[i] for i in order[:k]]

    def _one(self, request: ChatRequest, sample: int) -> str:
        tags = request.tags
        rng = self._rng(request, sample)
        family = tags.get("family")
        if family == "question":
            attempt = int(tags.get("attempt", 1))
            if self.bank.question_responses:
                return self.bank.question_responses[min(attempt, len(self.bank.question_responses)) - 1]
            n_q = int(tags.get("n_q", len(self.bank.questions)))
            picked = sorted(self._choose(range(len(self.bank.questions)), n_q, rng))
            return format_questions([self.bank.questions[i] for i in picked])
        B = int(tags.get("B", 5))
        if family == "univariate":
            var = str(tags["variable"])
            pool = self.bank.univariate.get(var) or self.bank.default_univariate
            return _fence([_fill(s, [var]) for s in self._choose(pool, B, rng)])
        if family == "multivariate":
            variables = list(tags.get("variables", ()))
            pool = (
                self.bank.multivariate.get(str(tags.get("question")))
                or self.bank.multivariate.get(",".join(variables))
                or self.bank.default_multivariate
            )
            return _fence([_fill(s, variables) for s in self._choose(pool, B, rng)])
        return "I cannot help with that.\n"

    def complete(self, request: ChatRequest) -> ChatResponse:
        completions = tuple(self._one(request, k) for k in range(request.n_samples))
        chars = len(request.system_text) + len(request.user_text)
        meta = {
            "provider": "mock",
            "prompt_tokens": chars // 4,
            "completion_tokens": sum(len(c) for c in completions) // 4,
        }
        return ChatResponse(completions, meta)


class HttpProvider:
    """OpenAI-compatible ``/chat/completions`` client with retry and backoff."""

    def __init__(
        self,
        config: ProviderConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.sleep = sleep
        headers = {"Content-Type": "application/json"}
        if config.token_env:
            token = os.environ.get(config.token_env)
            if not token:
                raise ProviderError(f"environment variable {config.token_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        self.client = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)

    @property
    def identity(self) -> str:
        return f"http:{self.config.endpoint}:model={self.config.model}"

    @staticmethod
    def body(request: ChatRequest, model: str | None = None) -> dict:
        return {
            "model": model or request.model_name,
            "messages": request.messages(),
            "temperature": request.temperature,
            "n": request.n_samples,
            "max_tokens": request.max_tokens,
        }

    def _delay(self, attempt: int, response: httpx.Response | None) -> float:
        if response is not None:
            retry_after = response.headers.get("Retry-After")
            try:
                return min(float(retry_after), self.config.backoff_max)
            except (TypeError, ValueError):
                pass
        return min(self.config.backoff * (2**attempt), self.config.backoff_max)

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = self.body(request, self.config.model)
        last_error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            response = None
            started = time.perf_counter()
            try:
                response = self.client.post(self.config.endpoint, json=body)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
            else:
                if response.status_code == 200:
                    return self._decode(response, request, time.perf_counter() - started)
                last_error = f"HTTP {response.status_code}"
                if response.status_code not in RETRYABLE_STATUS:
                    raise ProviderError(f"{last_error}: {response.text[:200]}")
            if attempt < self.config.max_retries:
                delay = self._delay(attempt, response)
                log.warning("provider request failed (%s); retry %d in %.2fs", last_error, attempt + 1, delay)
                self.sleep(delay)
        raise ProviderError(f"provider request failed after {self.config.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _decode(response: httpx.Response, request: ChatRequest, latency: float) -> ChatResponse:
        try:
            payload = response.json()
            choices = payload["choices"]
            texts = []
            for choice in choices:
                message = choice.get("message") or {}
                text = message.get("content", choice.get("text"))
                if not isinstance(text, str):
                    raise TypeError("choice without text content")
                texts.append(text)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise ProviderError(f"malformed provider payload: {exc}") from None
        if len(texts) != request.n_samples:
            raise ProviderError(f"expected {request.n_samples} completions, got {len(texts)}")
        usage = payload.get("usage") or {}
        return ChatResponse(tuple(texts), {"provider": "http", "latency_s": latency, **usage})

    def close(self):
        self.client.close()


def make_provider(config: ProviderConfig, transport: httpx.BaseTransport | None = None):
    if config.kind == "mock":
        return MockProvider(config.mock_bank or MockBank(), config.mock_seed or 0)
    return HttpProvider(config, transport=transport)


def complete(request: ChatRequest, provider_config: ProviderConfig) -> ChatResponse:
    provider = make_provider(provider_config)
    try:
        return provider.complete(request)
    finally:
        if hasattr(provider, "close"):
            provider.close()


def complete_many(provider, requests: Sequence[ChatRequest], max_in_flight: int = 4) -> list:
    """Complete requests with bounded concurrency, in request order.

    Each slot holds a ChatResponse or the ProviderError raised for it.
    """

    def one(req):
        try:
            return provider.complete(req)
        except ProviderError as exc:
            return exc

    if max_in_flight <= 1 or len(requests) <= 1:
        return [one(r) for r in requests]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, requests))
