import json

import httpx
import pytest

from tsfeatgen.cohort import Schema, VariableMeta
from tsfeatgen.llm import (
    ChatRequest,
    MockBank,
    MockProvider,
    ProviderConfig,
    ProviderError,
    QuestionPair,
    build_multivariate_prompt,
    build_question_prompt,
    build_univariate_prompt,
    complete_many,
    parse_candidates,
    parse_questions,
)
from tsfeatgen.llm.providers import HttpProvider, format_questions
from tsfeatgen.llm.responses import QuestionFormatError

STATS = {"observation_count": 10, "patient_coverage_fraction": 0.5, "mean": 85.0, "std": 4.5, "min": 70.0,
         "p25": 80.0, "median": 84.0, "p75": 90.0, "max": 120.0}
HR = VariableMeta("HR", "bpm", STATS)
SBP = VariableMeta("SBP", "mmHg", STATS)
SCHEMA = Schema((HR, SBP), (), "predict death")


def ok_body(texts, usage=None):
    return {"choices": [{"message": {"role": "assistant", "content": t}} for t in texts], "usage": usage or {}}


def http_provider(handler, **kw):
    sleeps = []
    config = ProviderConfig(kind="http", endpoint="https://llm.test/v1/chat/completions", model="m", **kw)
    provider = HttpProvider(config, transport=httpx.MockTransport(handler), sleep=sleeps.append)
    return provider, sleeps


# ----------------------------------------------------------------- prompts


def test_univariate_prompt_contents():
    req = build_univariate_prompt("predict death", HR, B=3)
    assert "Tools (1):" in req.user_text
    assert "get_in_window" not in req.user_text
    assert "mean=85" in req.user_text and "unit: bpm" in req.user_text
    assert "exactly 3" in req.user_text
    assert req.tags["variable"] == "HR"


def test_prompts_are_deterministic():
    a = build_univariate_prompt("t", HR)
    b = build_univariate_prompt("t", HR)
    assert a == b and a.prompt_hash == b.prompt_hash
    assert build_univariate_prompt("t2", HR).prompt_hash != a.prompt_hash


def test_question_prompt_lists_schema():
    req = build_question_prompt("t", SCHEMA, n_q=7)
    assert "exactly 7" in req.user_text
    assert "HR (unit: bpm)" in req.user_text and "SBP (unit: mmHg)" in req.user_text
    assert "QUESTION:" in req.user_text


def test_multivariate_prompt_has_all_tools():
    pair = QuestionPair("Is HR high when SBP is low?", ("HR", "SBP", "HR"))
    assert pair.variables == ("HR", "SBP")
    req = build_multivariate_prompt("t", pair, [HR, SBP], B=2)
    assert "Tools (5):" in req.user_text and "time_since_last" in req.user_text
    with pytest.raises(ValueError, match="SBP"):
        build_multivariate_prompt("t", pair, [HR])


def test_with_appended_keeps_nonce_and_merges_tags():
    req = ChatRequest("s", "u", tags={"family": "question"}, nonce=3)
    again = req.with_appended("fix it", attempt=2)
    assert again.user_text.endswith("fix it") and again.nonce == 3
    assert again.tags == {"family": "question", "attempt": 2}
    assert again.prompt_hash != req.prompt_hash


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("s", " ")
    with pytest.raises(ValueError):
        ChatRequest("s", "u", temperature=3.0)


# --------------------------------------------------------------- responses


def test_parse_candidates_takes_fenced_blocks_in_order():
    text = "intro\n```featscript\nmean(get_all_measurements(HR))\n```\nand\n```\n1 + 2\n```\n```python\n3\n```"
    assert parse_candidates(text, 5) == ["mean(get_all_measurements(HR))", "1 + 2", "3"]
    assert parse_candidates(text, 2) == ["mean(get_all_measurements(HR))", "1 + 2"]
    assert parse_candidates("no code here", 3) == []


def test_parse_questions_drops_unknown_and_duplicates():
    text = format_questions(
        [
            {"question": "Is HR rising?", "variables": ["HR"], "rationale": "r"},
            {"question": "is  hr rising", "variables": ["HR"]},
            {"question": "Does TEMP matter?", "variables": ["TEMP"]},
            {"question": "HR vs SBP?", "variables": "HR, SBP"},
        ]
    )
    pairs = parse_questions(text, SCHEMA)
    assert [p.question for p in pairs] == ["Is HR rising?", "HR vs SBP?"]
    assert pairs[1].variables == ("HR", "SBP")


def test_parse_questions_tolerates_markdown_bullets():
    text = "1. **QUESTION**: Is HR high?\n   **VARIABLES**: [HR]\n   **RATIONALE**: tachycardia\n"
    assert parse_questions(text, SCHEMA)[0].variables == ("HR",)


def test_parse_questions_format_error():
    with pytest.raises(QuestionFormatError):
        parse_questions("I think HR matters.", SCHEMA)
    assert parse_questions("", SCHEMA) == []


# ------------------------------------------------------------------- mock


def bank():
    return MockBank(
        univariate={"HR": ["p1({var})", "p2({var})", "p3({var})"]},
        multivariate={"Q?": ["m({v0},{v1})"]},
        questions=[{"question": f"Q{i}", "variables": ["HR", "SBP"]} for i in range(5)],
        default_univariate=["d({var})"],
    )


def test_mock_is_deterministic_in_seed_and_request():
    p = MockProvider(bank(), seed=1)
    req = build_univariate_prompt("t", HR, B=2)
    a, b = p.complete(req), p.complete(req)
    assert a.completions == b.completions
    assert len(parse_candidates(a.completions[0], 5)) == 2
    outs = {MockProvider(bank(), seed=s).complete(req).completions[0] for s in range(10)}
    assert len(outs) > 1


def test_mock_emits_whole_bank_without_replacement():
    req = build_univariate_prompt("t", HR, B=3)
    got = parse_candidates(MockProvider(bank(), 0).complete(req).completions[0], 5)
    assert sorted(got) == ["p1(HR)", "p2(HR)", "p3(HR)"]


def test_mock_default_pool_and_questions():
    req = build_univariate_prompt("t", SBP, B=3)
    assert parse_candidates(MockProvider(bank(), 0).complete(req).completions[0], 5) == ["d(SBP)"]
    qreq = build_question_prompt("t", SCHEMA, n_q=3)
    pairs = parse_questions(MockProvider(bank(), 0).complete(qreq).completions[0], SCHEMA)
    assert len(pairs) == 3


def test_mock_bank_serialization(tmp_path):
    b = bank()
    path = tmp_path / "bank.json"
    path.write_text(json.dumps(b.to_dict()))
    again = MockBank.load(path)
    assert again.digest() == b.digest()


# ------------------------------------------------------------------- http


def test_retry_on_429_then_success():
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        if len(calls) == 1:
            return httpx.Response(429, headers={"Retry-After": "2"})
        return httpx.Response(200, json=ok_body(["```\n1\n```"], {"prompt_tokens": 5}))

    provider, sleeps = http_provider(handler)
    resp = provider.complete(ChatRequest("sys", "user", temperature=0.5))
    assert resp.completions == ("```\n1\n```",)
    assert resp.provider_metadata["prompt_tokens"] == 5
    assert len(calls) == 2 and sleeps == [2.0]


def test_request_body_shape_excludes_tags():
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        return httpx.Response(200, json=ok_body(["x", "y"]))

    provider, _ = http_provider(handler)
    provider.complete(ChatRequest("sys", "user", 0.7, 2, 99, tags={"family": "question", "secret": "zz"}))
    assert set(seen) == {"model", "messages", "temperature", "n", "max_tokens"}
    assert seen["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "user"}]
    assert seen["n"] == 2 and seen["max_tokens"] == 99 and seen["model"] == "m"


def test_exponential_backoff_then_give_up():
    provider, sleeps = http_provider(lambda r: httpx.Response(503), max_retries=3, backoff=0.5)
    with pytest.raises(ProviderError, match="4 attempts"):
        provider.complete(ChatRequest("s", "u"))
    assert sleeps == [0.5, 1.0, 2.0]


def test_transport_errors_are_retried():
    n = {"k": 0}

    def handler(request):
        n["k"] += 1
        if n["k"] < 3:
            raise httpx.ConnectError("boom", request=request)
        return httpx.Response(200, json=ok_body(["ok"]))

    provider, sleeps = http_provider(handler)
    assert provider.complete(ChatRequest("s", "u")).completions == ("ok",)
    assert len(sleeps) == 2


def test_client_errors_are_not_retried():
    provider, sleeps = http_provider(lambda r: httpx.Response(400, text="bad request"))
    with pytest.raises(ProviderError, match="HTTP 400"):
        provider.complete(ChatRequest("s", "u"))
    assert sleeps == []


def test_malformed_payload():
    provider, _ = http_provider(lambda r: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(ProviderError, match="malformed"):
        provider.complete(ChatRequest("s", "u"))


def test_token_comes_from_environment(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=ok_body(["ok"]))

    monkeypatch.setenv("TEST_LLM_TOKEN", "sekret")
    provider, _ = http_provider(handler, token_env="TEST_LLM_TOKEN")
    provider.complete(ChatRequest("s", "u"))
    assert seen["auth"] == "Bearer sekret"
    monkeypatch.delenv("TEST_LLM_TOKEN")
    with pytest.raises(ProviderError, match="TEST_LLM_TOKEN"):
        http_provider(handler, token_env="TEST_LLM_TOKEN")


def test_complete_many_keeps_order_and_isolates_failures():
    def handler(request):
        body = json.loads(request.content)
        text = body["messages"][1]["content"]
        if text == "u2":
            return httpx.Response(400)
        return httpx.Response(200, json=ok_body([text.upper()]))

    provider, _ = http_provider(handler)
    out = complete_many(provider, [ChatRequest("s", f"u{i}") for i in range(5)], max_in_flight=3)
    assert [o.completions[0] if not isinstance(o, ProviderError) else "ERR" for o in out] == ["U0", "U1", "ERR", "U3", "U4"]


def test_provider_config_validation():
    with pytest.raises(ValueError):
        ProviderConfig(kind="http")
    with pytest.raises(ValueError):
        ProviderConfig(kind="grpc")
