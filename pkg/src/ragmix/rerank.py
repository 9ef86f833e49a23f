"""Zero-shot reranking: question-likelihood scoring and listwise prompting."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from ragmix.corpus import Passage
from ragmix.llm_client import (
    CompletionRequest,
    LLMClient,
    LLMClientError,
    ScoreRequest,
    run_bounded,
)
from ragmix.retriever import ScoredList


@dataclass(frozen=True)
class UPRConfig:
    """Prompt shape for question-likelihood reranking."""

    template: str = (
        "Passage: {passage}. Please write a question based on this passage."
    )
    question_prefix: str = "Question:"

    def __post_init__(self) -> None:
        count = self.template.count("{passage}")
        if count != 1:
            raise ValueError(
                f"template must contain {{passage}} exactly once, found {count}"
            )


def upr_score(
    client: LLMClient,
    question: str,
    passage: Passage,
    cfg: UPRConfig | None = None,
) -> float:
    """Mean token log-likelihood of the question conditioned on the passage."""
    cfg = cfg or UPRConfig()
    if not question.strip():
        raise ValueError("question is empty")
    context = cfg.template.format(passage=passage.text) + "\n" + cfg.question_prefix
    result = client.score(ScoreRequest(context=context, continuation=question))
    return result.mean()


def upr_rerank(
    client: LLMClient,
    question: str,
    docs: Sequence[Passage],
    cfg: UPRConfig | None = None,
    query_id: str | None = None,
) -> ScoredList:
    """Reorder docs by descending question likelihood; ties keep input order.

    Any scoring failure aborts the whole rerank.
    """
    cfg = cfg or UPRConfig()
    docs = list(docs)
    if not docs:
        raise ValueError("no documents to rerank")
    scores = run_bounded(
        lambda doc: upr_score(client, question, doc, cfg), docs, client.max_in_flight
    )
    order = sorted(range(len(docs)), key=lambda i: (-scores[i], i))
    items = [(docs[i], scores[i]) for i in order]
    return ScoredList(query_id=query_id if query_id is not None else question, items=items)


# --- listwise permutation reranking ------------------------------------------

DEFAULT_RANKGPT_TEMPLATE = (
    "I will provide you with {num} passages, each tagged with a numerical "
    "identifier like [1].\n"
    "Rank the passages by their relevance to the query: {query}\n\n"
    "{documents}\n\n"
    "Query: {query}\n"
    "Rank the {num} passages above in descending order of relevance. Answer "
    "only with identifiers, like [2] > [1] > [3]."
)


@dataclass(frozen=True)
class RankGPTConfig:
    """Sliding-window listwise reranking configuration."""

    window_size: int = 20
    stride: int = 10
    instruction_template: str = DEFAULT_RANKGPT_TEMPLATE
    max_tokens: int = 128

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ValueError(f"window_size must be >= 1, got {self.window_size}")
        if not 1 <= self.stride <= self.window_size:
            raise ValueError(
                f"stride must be in [1, window_size], got stride={self.stride} "
                f"window_size={self.window_size}"
            )
        if "{query}" not in self.instruction_template:
            raise ValueError("instruction_template must contain {query}")
        if "{documents}" not in self.instruction_template:
            raise ValueError("instruction_template must contain {documents}")


_INT_RE = re.compile(r"\d+")


def parse_permutation(text: str, n: int) -> list[int]:
    """Repair a model ranking reply into a permutation of 1..n.

    Integers are read in order of appearance; duplicates and out-of-range
    values are dropped, and missing identifiers are appended in original
    order.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out: list[int] = []
    seen: set[int] = set()
    for match in _INT_RE.finditer(text):
        value = int(match.group())
        if 1 <= value <= n and value not in seen:
            seen.add(value)
            out.append(value)
    out.extend(i for i in range(1, n + 1) if i not in seen)
    return out


def _window_prompt(question: str, window: Sequence[Passage], cfg: RankGPTConfig) -> str:
    documents = "\n".join(f"[{i}] {p.text}" for i, p in enumerate(window, start=1))
    return cfg.instruction_template.format(
        query=question, num=len(window), documents=documents
    )


def rankgpt_rerank(
    client: LLMClient,
    question: str,
    docs: Sequence[Passage],
    cfg: RankGPTConfig | None = None,
    query_id: str | None = None,
    meta: dict | None = None,
) -> ScoredList:
    """Listwise rerank with sliding windows moving from the list tail to the head.

    A failed window keeps its current order; the failure is recorded under
    meta["rankgpt_failures"] when a meta dict is supplied. Final scores are
    1/rank.
    """
    cfg = cfg or RankGPTConfig()
    current = list(docs)
    if not current:
        raise ValueError("no documents to rerank")
    n = len(current)
    start = max(0, n - cfg.window_size)
    while True:
        end = min(start + cfg.window_size, n)
        window = current[start:end]
        prompt = _window_prompt(question, window, cfg)
        try:
            reply = client.complete(
                CompletionRequest(prompt=prompt, max_tokens=cfg.max_tokens)
            )
        except LLMClientError as exc:
            if meta is not None:
                meta.setdefault("rankgpt_failures", []).append(
                    {"window": [start, end], "error": str(exc)}
                )
        else:
            permutation = parse_permutation(reply, len(window))
            current[start:end] = [window[i - 1] for i in permutation]
        if start == 0:
            break
        start = max(0, start - cfg.stride)
    items = [(p, 1.0 / rank) for rank, p in enumerate(current, start=1)]
    return ScoredList(query_id=query_id if query_id is not None else question, items=items)
