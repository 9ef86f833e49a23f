"""Client behavior: mocks, the scripted double, and the HTTP backend."""

from __future__ import annotations

import json
import math
from collections import deque

import pytest
import requests

from ragmix.llm_client import (
    CapabilityError,
    CompletionRequest,
    HTTPClient,
    LLMClientError,
    MockEchoClient,
    MockUniformClient,
    ProtocolError,
    ScoreRequest,
    ScriptedClient,
    TokenLogProbs,
    TransportError,
    build_client,
    run_bounded,
)


class StubResponse:
    def __init__(self, status_code=200, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text if text else json.dumps(body)

    def json(self):
        if self._body is None:
            raise ValueError("no body")
        return self._body


class StubSession:
    """Replays a queue of responses/exceptions; records every post."""

    def __init__(self, outcomes):
        self.outcomes = deque(outcomes)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append({"url": url, "payload": json, "headers": headers})
        outcome = self.outcomes.popleft()
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def http_client(outcomes, **kwargs) -> tuple[HTTPClient, StubSession]:
    session = StubSession(outcomes)
    client = HTTPClient(
        base_url="http://stub",
        model="test-model",
        retry_delays=(0.0, 0.0),
        session=session,
        **kwargs,
    )
    return client, session


def chat_body(content):
    return {"choices": [{"message": {"content": content}}]}


class TestRequests:
    def test_completion_request_validation(self):
        with pytest.raises(ValueError):
            CompletionRequest(prompt="x", max_tokens=0)
        with pytest.raises(ValueError):
            CompletionRequest(prompt="x", temperature=-0.5)

    def test_score_request_needs_continuation(self):
        with pytest.raises(ValueError, match="continuation"):
            ScoreRequest(context="c", continuation="   ")

    def test_token_logprobs_length_mismatch(self):
        with pytest.raises(ProtocolError, match="mismatch"):
            TokenLogProbs(tokens=("a", "b"), logprobs=(-1.0,))

    def test_mean_is_arithmetic(self):
        tlp = TokenLogProbs(tokens=("a", "b", "c"), logprobs=(-1.0, -2.0, -3.0))
        assert tlp.mean() == -2.0

    def test_mean_of_empty_raises(self):
        with pytest.raises(ProtocolError):
            TokenLogProbs(tokens=(), logprobs=()).mean()


class TestMockEcho:
    def test_echoes_with_prefix(self):
        client = MockEchoClient()
        assert client.complete(CompletionRequest(prompt="Q: who?")) == "MOCK:Q: who?"

    def test_stop_sequence_truncates(self):
        client = MockEchoClient()
        out = client.complete(CompletionRequest(prompt="first\nsecond", stop=("\n",)))
        assert out == "MOCK:first"

    def test_earliest_stop_wins(self):
        client = MockEchoClient()
        out = client.complete(
            CompletionRequest(prompt="a;b\nc", stop=("\n", ";"))
        )
        assert out == "MOCK:a"

    def test_max_tokens_truncates_on_whitespace(self):
        client = MockEchoClient()
        out = client.complete(
            CompletionRequest(prompt="one two three four", max_tokens=2)
        )
        assert out == "MOCK:one two"

    def test_scoring_unsupported(self):
        client = MockEchoClient()
        with pytest.raises(CapabilityError, match="mock-echo"):
            client.score(ScoreRequest(context="c", continuation="x"))

    def test_call_counter(self):
        client = MockEchoClient()
        for _ in range(3):
            client.complete(CompletionRequest(prompt="p"))
        assert client.calls == 3


class TestMockUniform:
    def test_score_is_uniform(self):
        client = MockUniformClient(vocab_size=16)
        tlp = client.score(ScoreRequest(context="c", continuation="alpha beta gamma"))
        assert tlp.tokens == ("alpha", "beta", "gamma")
        assert all(lp == -math.log(16) for lp in tlp.logprobs)
        assert tlp.mean() == pytest.approx(-math.log(16), abs=1e-15)

    def test_vocab_size_changes_logprob(self):
        client = MockUniformClient(vocab_size=7)
        tlp = client.score(ScoreRequest(context="", continuation="x"))
        assert tlp.logprobs == (-math.log(7),)

    def test_vocab_size_floor(self):
        with pytest.raises(ValueError):
            MockUniformClient(vocab_size=1)

    def test_completion_deterministic(self):
        a = MockUniformClient().complete(CompletionRequest(prompt="same"))
        b = MockUniformClient().complete(CompletionRequest(prompt="same"))
        assert a == b

    def test_completion_varies_with_prompt(self):
        client = MockUniformClient()
        assert client.complete(
            CompletionRequest(prompt="one")
        ) != client.complete(CompletionRequest(prompt="two"))

    def test_completion_words_from_vocab(self):
        client = MockUniformClient(vocab_size=4)
        out = client.complete(CompletionRequest(prompt="p", max_tokens=50))
        words = out.split()
        assert 1 <= len(words) <= 8
        assert set(words) <= {"w00", "w01", "w02", "w03"}

    def test_max_tokens_caps_words(self):
        client = MockUniformClient()
        out = client.complete(CompletionRequest(prompt="p", max_tokens=3))
        assert len(out.split()) == 3


class TestScripted:
    def test_replies_in_order_then_exhausted(self):
        client = ScriptedClient(replies=["one", "two"])
        assert client.complete(CompletionRequest(prompt="a")) == "one"
        assert client.complete(CompletionRequest(prompt="b")) == "two"
        with pytest.raises(LLMClientError, match="no replies"):
            client.complete(CompletionRequest(prompt="c"))

    def test_complete_fn(self):
        client = ScriptedClient(complete_fn=lambda req: req.prompt.upper())
        assert client.complete(CompletionRequest(prompt="abc")) == "ABC"

    def test_score_fn_and_log(self):
        client = ScriptedClient(score_fn=lambda req: [-1.0, -2.0])
        tlp = client.score(ScoreRequest(context="ctx", continuation="a b"))
        assert tlp.logprobs == (-1.0, -2.0)
        assert client.score_log[0].context == "ctx"

    def test_no_score_fn(self):
        client = ScriptedClient(replies=["x"])
        with pytest.raises(CapabilityError):
            client.score(ScoreRequest(context="", continuation="x"))

    def test_completion_log_records_requests(self):
        client = ScriptedClient(replies=["x"])
        client.complete(CompletionRequest(prompt="p", stop=("\n",)))
        assert client.completion_log[0].stop == ("\n",)

    def test_replies_respect_stop(self):
        client = ScriptedClient(replies=["line1\nline2"])
        out = client.complete(CompletionRequest(prompt="p", stop=("\n",)))
        assert out == "line1"


class TestRunBounded:
    def test_preserves_order(self):
        out = run_bounded(lambda x: x * 2, [3, 1, 2], max_workers=4)
        assert out == [6, 2, 4]

    def test_sequential_path(self):
        out = run_bounded(lambda x: x + 1, [1, 2, 3], max_workers=1)
        assert out == [2, 3, 4]

    def test_counter_safe_under_workers(self):
        client = MockEchoClient()
        prompts = [CompletionRequest(prompt=f"p{i}") for i in range(40)]
        run_bounded(client.complete, prompts, max_workers=8)
        assert client.calls == 40

    def test_exception_propagates(self):
        def boom(x):
            raise LLMClientError("bad")

        with pytest.raises(LLMClientError):
            run_bounded(boom, [1, 2], max_workers=2)


class TestHTTPComplete:
    def test_success(self):
        client, session = http_client([StubResponse(body=chat_body("hello"))])
        out = client.complete(CompletionRequest(prompt="hi", max_tokens=5))
        assert out == "hello"
        payload = session.posts[0]["payload"]
        assert payload["model"] == "test-model"
        assert payload["max_tokens"] == 5
        assert session.posts[0]["url"] == "http://stub/chat/completions"

    def test_retries_transport_errors(self):
        client, session = http_client(
            [
                requests.ConnectionError("down"),
                requests.Timeout("slow"),
                StubResponse(body=chat_body("ok")),
            ]
        )
        assert client.complete(CompletionRequest(prompt="hi")) == "ok"
        assert len(session.posts) == 3

    def test_gives_up_after_three_attempts(self):
        client, session = http_client([requests.ConnectionError("down")] * 3)
        with pytest.raises(TransportError, match="3 attempts"):
            client.complete(CompletionRequest(prompt="hi"))
        assert len(session.posts) == 3

    def test_429_retryable(self):
        client, session = http_client(
            [
                StubResponse(status_code=429, body={}, text="slow down"),
                StubResponse(body=chat_body("ok")),
            ]
        )
        assert client.complete(CompletionRequest(prompt="hi")) == "ok"

    def test_400_not_retried(self):
        client, session = http_client(
            [StubResponse(status_code=400, body={}, text="bad request")]
        )
        with pytest.raises(LLMClientError, match="refused"):
            client.complete(CompletionRequest(prompt="hi"))
        assert len(session.posts) == 1

    def test_refusal_surfaces_message(self):
        body = {"choices": [{"message": {"content": None, "refusal": "nope"}}]}
        client, _ = http_client([StubResponse(body=body)])
        with pytest.raises(LLMClientError, match="nope"):
            client.complete(CompletionRequest(prompt="hi"))

    def test_malformed_body(self):
        client, _ = http_client([StubResponse(body={"weird": True})])
        with pytest.raises(ProtocolError, match="malformed"):
            client.complete(CompletionRequest(prompt="hi"))

    def test_stop_passed_through(self):
        client, session = http_client([StubResponse(body=chat_body("x"))])
        client.complete(CompletionRequest(prompt="hi", stop=("\n",)))
        assert session.posts[0]["payload"]["stop"] == ["\n"]

    def test_auth_header_only_with_key(self):
        client, session = http_client([StubResponse(body=chat_body("x"))])
        client.complete(CompletionRequest(prompt="hi"))
        assert "Authorization" not in session.posts[0]["headers"]

        client2, session2 = http_client(
            [StubResponse(body=chat_body("x"))], api_key="sk-test"
        )
        client2.complete(CompletionRequest(prompt="hi"))
        assert session2.posts[0]["headers"]["Authorization"] == "Bearer sk-test"

    def test_requires_base_url(self, monkeypatch):
        monkeypatch.delenv("RAGMIX_API_BASE", raising=False)
        with pytest.raises(ValueError, match="base url"):
            HTTPClient(model="m")


def score_body(tokens, logprobs, offsets):
    return {
        "choices": [
            {
                "logprobs": {
                    "tokens": tokens,
                    "token_logprobs": logprobs,
                    "text_offset": offsets,
                }
            }
        ]
    }


class TestHTTPScore:
    def test_slices_continuation_by_offset(self):
        # Prompt is context "AB" + continuation "CD"; only tokens whose text
        # offset lands at or after the boundary belong to the continuation.
        body = score_body(["A", "B", "C", "D"], [None, -1.0, -2.0, -3.0], [0, 1, 2, 3])
        client, session = http_client([StubResponse(body=body)])
        tlp = client.score(ScoreRequest(context="AB", continuation="CD"))
        assert tlp.tokens == ("C", "D")
        assert tlp.logprobs == (-2.0, -3.0)
        payload = session.posts[0]["payload"]
        assert payload["prompt"] == "ABCD"
        assert payload["echo"] is True
        assert session.posts[0]["url"] == "http://stub/completions"

    def test_multichar_tokens(self):
        body = score_body(
            ["Hel", "lo ", "wor", "ld"], [None, -0.5, -0.25, -0.125], [0, 3, 6, 9]
        )
        client, _ = http_client([StubResponse(body=body)])
        tlp = client.score(ScoreRequest(context="Hello ", continuation="world"))
        assert tlp.tokens == ("wor", "ld")
        assert tlp.logprobs == (-0.25, -0.125)

    def test_none_logprob_mid_sequence_rejected(self):
        body = score_body(["A", "B"], [-1.0, None], [0, 1])
        client, _ = http_client([StubResponse(body=body)])
        with pytest.raises(ProtocolError, match="missing logprob"):
            client.score(ScoreRequest(context="", continuation="AB"))

    def test_empty_context_keeps_all_but_first_none(self):
        body = score_body(["A", "B"], [None, -1.0], [0, 1])
        client, _ = http_client([StubResponse(body=body)])
        tlp = client.score(ScoreRequest(context="", continuation="AB"))
        assert tlp.tokens == ("B",)

    def test_no_logprobs_capability(self):
        body = {"choices": [{"logprobs": None}]}
        client, _ = http_client([StubResponse(body=body)])
        with pytest.raises(CapabilityError):
            client.score(ScoreRequest(context="c", continuation="x"))

    def test_array_length_disagreement(self):
        body = score_body(["A", "B"], [-1.0], [0, 1])
        client, _ = http_client([StubResponse(body=body)])
        with pytest.raises(ProtocolError, match="disagree"):
            client.score(ScoreRequest(context="", continuation="AB"))

    def test_no_tokens_in_continuation(self):
        body = score_body(["A"], [None], [0])
        client, _ = http_client([StubResponse(body=body)])
        with pytest.raises(ProtocolError, match="no scored tokens"):
            client.score(ScoreRequest(context="A", continuation="B"))

    def test_base_conversion(self):
        # A backend reporting base-2 logprobs: -1 bit is -ln(2) nats.
        body = score_body(["A", "B"], [None, -1.0], [0, 1])
        client, _ = http_client([StubResponse(body=body)], logprob_base=2.0)
        tlp = client.score(ScoreRequest(context="A", continuation="B"))
        assert tlp.logprobs[0] == pytest.approx(-math.log(2), abs=1e-15)


class TestBuildClient:
    def test_mock_echo_default(self):
        assert isinstance(build_client({}), MockEchoClient)

    def test_mock_uniform_with_vocab(self):
        client = build_client({"backend": "mock-uniform", "vocab_size": 9})
        assert isinstance(client, MockUniformClient)
        assert client.vocab_size == 9

    def test_unknown_backend(self):
        with pytest.raises(ValueError, match="unknown backend"):
            build_client({"backend": "quantum"})

    def test_http_backend(self):
        client = build_client(
            {"backend": "http", "base_url": "http://x", "model": "m"}
        )
        assert isinstance(client, HTTPClient)
        assert client.name == "http:m"
