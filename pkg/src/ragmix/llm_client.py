"""LLM clients: text completion and token-level scoring.

Two deterministic mocks cover offline runs, and an OpenAI-compatible HTTP
client covers live backends. All log probabilities are natural log.
"""

from __future__ import annotations

import hashlib
import math
import os
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import requests


class LLMClientError(Exception):
    """Base error for client failures."""


class TransportError(LLMClientError):
    """The backend could not be reached after retries."""


class CapabilityError(LLMClientError):
    """The backend does not support the requested operation."""


class ProtocolError(LLMClientError):
    """The backend replied with a malformed or inconsistent payload."""


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = 128
    temperature: float = 0.0
    stop: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class ScoreRequest:
    context: str
    continuation: str

    def __post_init__(self) -> None:
        if not self.continuation.strip():
            raise ValueError("continuation is empty")


@dataclass(frozen=True)
class TokenLogProbs:
    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.logprobs):
            raise ProtocolError(
                f"token/logprob length mismatch: {len(self.tokens)} tokens, "
                f"{len(self.logprobs)} logprobs"
            )

    def mean(self) -> float:
        if not self.logprobs:
            raise ProtocolError("no logprobs to average")
        return sum(self.logprobs) / len(self.logprobs)


class LLMClient:
    """Common interface: complete() for text, score() for token logprobs."""

    name = "base"
    max_in_flight = 4

    def __init__(self) -> None:
        self.calls = 0
        self._lock = threading.Lock()

    def _count(self) -> None:
        with self._lock:
            self.calls += 1

    def complete(self, request: CompletionRequest) -> str:
        raise NotImplementedError

    def score(self, request: ScoreRequest) -> TokenLogProbs:
        raise CapabilityError(f"backend {self.name!r} does not support scoring")


def _truncate_at_stop(text: str, stop: Sequence[str]) -> str:
    cut = len(text)
    for seq in stop:
        idx = text.find(seq)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut]


def _truncate_tokens(text: str, max_tokens: int) -> str:
    tokens = text.split()
    if len(tokens) <= max_tokens:
        return text
    return " ".join(tokens[:max_tokens])


class MockEchoClient(LLMClient):
    """Echoes the prompt back, prefixed with ``MOCK:``. Completion only."""

    name = "mock-echo"

    def complete(self, request: CompletionRequest) -> str:
        self._count()
        text = "MOCK:" + request.prompt
        text = _truncate_at_stop(text, request.stop)
        return _truncate_tokens(text, request.max_tokens)


class MockUniformClient(LLMClient):
    """Scores every token at -ln(vocab_size); completes with hash-picked tokens."""

    name = "mock-uniform"

    def __init__(self, vocab_size: int = 16) -> None:
        super().__init__()
        if vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
        self.vocab_size = vocab_size
        self._vocab = [f"w{i:02d}" for i in range(vocab_size)]

    def complete(self, request: CompletionRequest) -> str:
        self._count()
        digest = hashlib.sha256(request.prompt.encode("utf-8")).digest()
        n = min(request.max_tokens, 8)
        words = [self._vocab[digest[i] % self.vocab_size] for i in range(n)]
        text = " ".join(words)
        return _truncate_at_stop(text, request.stop)

    def score(self, request: ScoreRequest) -> TokenLogProbs:
        self._count()
        tokens = tuple(request.continuation.split())
        logprob = -math.log(self.vocab_size)
        return TokenLogProbs(tokens=tokens, logprobs=(logprob,) * len(tokens))


class ScriptedClient(LLMClient):
    """Test double driven by canned replies or user-supplied functions."""

    name = "scripted"

    def __init__(
        self,
        replies: Iterable[str] | None = None,
        complete_fn: Callable[[CompletionRequest], str] | None = None,
        score_fn: Callable[[ScoreRequest], Sequence[float]] | None = None,
    ) -> None:
        super().__init__()
        self._replies = deque(replies or ())
        self._complete_fn = complete_fn
        self._score_fn = score_fn
        self.completion_log: list[CompletionRequest] = []
        self.score_log: list[ScoreRequest] = []

    def complete(self, request: CompletionRequest) -> str:
        self._count()
        self.completion_log.append(request)
        if self._complete_fn is not None:
            text = self._complete_fn(request)
        elif self._replies:
            text = self._replies.popleft()
        else:
            raise LLMClientError("scripted client: no replies left")
        text = _truncate_at_stop(text, request.stop)
        return _truncate_tokens(text, request.max_tokens)

    def score(self, request: ScoreRequest) -> TokenLogProbs:
        self._count()
        self.score_log.append(request)
        if self._score_fn is None:
            raise CapabilityError("scripted client has no score function")
        logprobs = tuple(float(v) for v in self._score_fn(request))
        tokens = tuple(request.continuation.split())
        return TokenLogProbs(tokens=tokens, logprobs=logprobs)


_RETRYABLE_STATUS = (429, 500, 502, 503, 504)


class HTTPClient(LLMClient):
    """OpenAI-compatible HTTP backend.

    complete() posts to /chat/completions; score() posts to /completions with
    echo+logprobs and slices out the continuation's tokens by text offset.
    Transient transport failures retry up to three attempts with backoff.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        retry_delays: Sequence[float] = (0.5, 2.0),
        logprob_base: float = math.e,
        session: requests.Session | None = None,
    ) -> None:
        super().__init__()
        self.base_url = (base_url or os.environ.get("RAGMIX_API_BASE", "")).rstrip("/")
        if not self.base_url:
            raise ValueError("no API base url; set RAGMIX_API_BASE or pass base_url")
        self.api_key = api_key or os.environ.get("RAGMIX_API_KEY", "")
        self.model = model or os.environ.get("RAGMIX_MODEL", "")
        if not self.model:
            raise ValueError("no model name; set RAGMIX_MODEL or pass model")
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self.retry_delays = tuple(retry_delays)
        self.logprob_base = logprob_base
        self.session = session or requests.Session()
        self.name = f"http:{self.model}"
        self._semaphore = threading.Semaphore(max_in_flight)

    def _post(self, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        attempts = len(self.retry_delays) + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.retry_delays[attempt - 1])
            with self._semaphore:
                try:
                    response = self.session.post(
                        self.base_url + path,
                        json=payload,
                        headers=headers,
                        timeout=self.timeout,
                    )
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last_error = exc
                    continue
            if response.status_code in _RETRYABLE_STATUS:
                last_error = LLMClientError(
                    f"HTTP {response.status_code}: {response.text[:200]}"
                )
                continue
            if response.status_code >= 400:
                # Non-transient refusal: surface the backend's message as-is.
                raise LLMClientError(
                    f"backend refused request (HTTP {response.status_code}): "
                    f"{response.text[:500]}"
                )
            try:
                return response.json()
            except ValueError as exc:
                raise ProtocolError(f"backend returned non-JSON body: {exc}") from exc
        raise TransportError(
            f"request to {self.base_url + path} failed after {attempts} attempts: "
            f"{last_error}"
        )

    def complete(self, request: CompletionRequest) -> str:
        self._count()
        payload: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop:
            payload["stop"] = list(request.stop)
        body = self._post("/chat/completions", payload)
        try:
            message = body["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {body}") from exc
        content = message.get("content")
        if content is None:
            refusal = message.get("refusal") or "backend returned no content"
            raise LLMClientError(f"backend refusal: {refusal}")
        return content

    def score(self, request: ScoreRequest) -> TokenLogProbs:
        self._count()
        payload = {
            "model": self.model,
            "prompt": request.context + request.continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
            "temperature": 0.0,
        }
        body = self._post("/completions", payload)
        try:
            lp = body["choices"][0]["logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed scoring response: {body}") from exc
        if lp is None:
            raise CapabilityError("backend did not return logprobs")
        tokens = lp.get("tokens")
        logprobs = lp.get("token_logprobs")
        offsets = lp.get("text_offset")
        if tokens is None or logprobs is None or offsets is None:
            raise CapabilityError("backend logprobs lack tokens/values/offsets")
        if not (len(tokens) == len(logprobs) == len(offsets)):
            raise ProtocolError(
                f"logprob arrays disagree in length: {len(tokens)} tokens, "
                f"{len(logprobs)} logprobs, {len(offsets)} offsets"
            )
        boundary = len(request.context)
        out_tokens: list[str] = []
        out_logprobs: list[float] = []
        for token, value, offset in zip(tokens, logprobs, offsets):
            if offset < boundary:
                continue
            if value is None:
                # Only the very first token of a prompt lacks a conditional.
                if offset == 0:
                    continue
                raise ProtocolError(f"missing logprob for token {token!r}")
            out_tokens.append(token)
            out_logprobs.append(self._to_natural(float(value)))
        if not out_tokens:
            raise ProtocolError("no scored tokens fall inside the continuation")
        return TokenLogProbs(tokens=tuple(out_tokens), logprobs=tuple(out_logprobs))

    def _to_natural(self, value: float) -> float:
        if self.logprob_base == math.e:
            return value
        return value * math.log(self.logprob_base)


def build_client(config: dict) -> LLMClient:
    """Construct a client from a backend config mapping."""
    backend = config.get("backend", "mock-echo")
    if backend == "mock-echo":
        return MockEchoClient()
    if backend == "mock-uniform":
        return MockUniformClient(vocab_size=int(config.get("vocab_size", 16)))
    if backend == "http":
        return HTTPClient(
            base_url=config.get("base_url"),
            api_key=config.get("api_key"),
            model=config.get("model"),
            timeout=float(config.get("timeout", 60.0)),
            max_in_flight=int(config.get("max_in_flight", 4)),
        )
    raise ValueError(f"unknown backend {backend!r}")


def run_bounded(fn: Callable, items: Sequence, max_workers: int) -> list:
    """Apply fn to items, optionally in parallel, preserving input order."""
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))
