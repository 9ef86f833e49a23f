"""Evaluation: retrieval accuracy, QA metrics, ranking quality, perplexity."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from ragmix.corpus import Passage, QAExample, normalize_answer
from ragmix.fusion import FusionMode, fuse
from ragmix.llm_client import LLMClient, ScoreRequest
from ragmix.retriever import InvertedIndex, ScoredList, search


class EvalError(ValueError):
    """Invalid metric input."""


# --- retrieval accuracy ------------------------------------------------------


def _gold_norms(example: QAExample) -> list[str]:
    # Golds that normalize to nothing would match every passage; skip them.
    return [g for g in (normalize_answer(a) for a in example.answers) if g]


def topk_hits(
    results: Mapping[str, ScoredList],
    examples: Sequence[QAExample],
    ks: Sequence[int],
) -> dict[str, dict[int, int]]:
    """Per-example hit indicators: does any top-k passage contain a gold answer?"""
    if not examples:
        raise EvalError("no examples")
    if any(k < 1 for k in ks):
        raise EvalError(f"all k must be >= 1, got {list(ks)}")
    hits: dict[str, dict[int, int]] = {}
    for example in examples:
        if example.id not in results:
            raise EvalError(f"no retrieval results for query {example.id!r}")
        golds = _gold_norms(example)
        texts = [normalize_answer(p.text) for p in results[example.id].passages()]
        hits[example.id] = {}
        for k in ks:
            top = texts[:k]
            hits[example.id][k] = int(
                any(g in text for text in top for g in golds)
            )
    return hits


def topk_accuracy(
    results: Mapping[str, ScoredList],
    examples: Sequence[QAExample],
    ks: Sequence[int],
) -> dict[int, float]:
    """Fraction of examples whose top-k passages contain a gold answer."""
    hits = topk_hits(results, examples, ks)
    return {
        k: sum(hits[ex.id][k] for ex in examples) / len(examples) for k in ks
    }


# --- answer metrics ----------------------------------------------------------


def exact_match(prediction: str, golds: Sequence[str]) -> bool:
    """True when the normalized prediction equals any normalized gold."""
    if not golds:
        raise EvalError("no gold answers")
    pred = normalize_answer(prediction)
    return any(pred == normalize_answer(g) for g in golds)


def answer_recall(prediction: str, golds: Sequence[str]) -> float:
    """Best token recall of the prediction against any gold (multiset overlap)."""
    if not golds:
        raise EvalError("no gold answers")
    pred_norm = normalize_answer(prediction)
    pred_counts = Counter(pred_norm.split())
    best = 0.0
    for gold in golds:
        gold_tokens = normalize_answer(gold).split()
        if not gold_tokens:
            # An empty gold is only "recovered" by an empty prediction.
            if not pred_norm:
                best = max(best, 1.0)
            continue
        overlap = sum((Counter(gold_tokens) & pred_counts).values())
        best = max(best, overlap / len(gold_tokens))
    return best


def containment(prediction: str, golds: Sequence[str]) -> bool:
    """True when any normalized gold appears inside the normalized prediction."""
    if not golds:
        raise EvalError("no gold answers")
    pred = normalize_answer(prediction)
    for gold in golds:
        gold_norm = normalize_answer(gold)
        if gold_norm and gold_norm in pred:
            return True
    return False


# --- ranking quality ---------------------------------------------------------


@dataclass
class Qrels:
    """Relevance judgments: query id -> {doc id -> grade}."""

    judgments: dict[str, dict[str, int]]

    def relevant_queries(self) -> list[str]:
        return [
            qid
            for qid, docs in self.judgments.items()
            if any(rel > 0 for rel in docs.values())
        ]


def load_qrels(path: str | Path) -> Qrels:
    """Read TREC qrels lines: qid iteration docid rel."""
    path = Path(path)
    judgments: dict[str, dict[str, int]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise EvalError(f"{path}: line {lineno}: expected 4 fields")
        qid, _, doc_id, rel = fields
        try:
            grade = int(rel)
        except ValueError as exc:
            raise EvalError(f"{path}: line {lineno}: bad relevance grade") from exc
        if grade < 0:
            raise EvalError(f"{path}: line {lineno}: negative relevance grade")
        if doc_id in judgments.get(qid, {}):
            raise EvalError(
                f"{path}: line {lineno}: duplicate judgment for ({qid}, {doc_id})"
            )
        judgments.setdefault(qid, {})[doc_id] = grade
    if not judgments:
        raise EvalError(f"{path}: empty qrels")
    return Qrels(judgments=judgments)


def _dcg(grades: Sequence[int], k: int) -> float:
    return sum(
        (2.0**grade - 1.0) / math.log2(position + 2)
        for position, grade in enumerate(grades[:k])
    )


def ndcg_per_query(
    run: Mapping[str, ScoredList], qrels: Qrels, k: int
) -> dict[str, float]:
    """nDCG@k per query, for queries holding at least one relevant judgment.

    Unjudged retrieved documents count as grade 0; a judged query missing
    from the run scores 0.
    """
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    if not qrels.judgments:
        raise EvalError("empty qrels")
    out: dict[str, float] = {}
    for qid in qrels.relevant_queries():
        judged = qrels.judgments[qid]
        ideal = _dcg(sorted(judged.values(), reverse=True), k)
        if qid in run:
            grades = [judged.get(doc_id, 0) for doc_id in run[qid].doc_ids()]
            out[qid] = _dcg(grades, k) / ideal
        else:
            out[qid] = 0.0
    if not out:
        raise EvalError("qrels contain no relevant judgments")
    return out


def ndcg_at_k(run: Mapping[str, ScoredList], qrels: Qrels, k: int) -> float:
    """Mean nDCG@k over queries with at least one relevant judgment."""
    per_query = ndcg_per_query(run, qrels, k)
    return sum(per_query.values()) / len(per_query)


# --- retrieval-augmented perplexity ------------------------------------------

_PPL_MODES = ("none", "R", "G", "RG", "GR")


@dataclass(frozen=True)
class PPLStrategy:
    """How to build context while scoring a text window by window."""

    mode: str = "none"
    retrieval_stride: int = 32
    query_len: int = 32
    k_ctx: int = 1

    def __post_init__(self) -> None:
        if self.mode not in _PPL_MODES:
            raise ValueError(f"mode must be one of {_PPL_MODES}, got {self.mode!r}")
        if self.retrieval_stride < 1:
            raise ValueError("retrieval_stride must be >= 1")
        if self.query_len < 1:
            raise ValueError("query_len must be >= 1")
        if self.k_ctx < 1:
            raise ValueError("k_ctx must be >= 1")


def perplexity(
    client: LLMClient,
    text: str,
    strategy: PPLStrategy | None = None,
    index: InvertedIndex | None = None,
    gen: Callable[[str], list[Passage]] | None = None,
) -> float:
    """exp(-mean log-likelihood) of the text under the client's token model.

    The text is scored in windows of retrieval_stride words. Before each
    window, a query of the last query_len words retrieves and/or generates
    context documents per the strategy mode, and those documents plus the
    preceding text form the scoring context. The first window has no
    preceding words, so its query falls back to its own leading words; that
    way every window carries context under a non-none mode. Hybrid modes
    fetch k_ctx documents from each source.
    """
    strategy = strategy or PPLStrategy()
    if not text.strip():
        raise EvalError("text is empty")
    needs_r = strategy.mode in ("R", "RG", "GR")
    needs_g = strategy.mode in ("G", "RG", "GR")
    if needs_r and index is None:
        raise EvalError(f"strategy {strategy.mode} needs an index")
    if needs_g and gen is None:
        raise EvalError(f"strategy {strategy.mode} needs a generator")

    words = text.split()
    logprobs: list[float] = []
    for start in range(0, len(words), strategy.retrieval_stride):
        window = words[start : start + strategy.retrieval_stride]
        if start == 0:
            query_words = words[: strategy.query_len]
        else:
            query_words = words[max(0, start - strategy.query_len) : start]
        query = " ".join(query_words)

        docs: list[Passage] = []
        if strategy.mode != "none":
            retrieved = (
                search(index, query, strategy.k_ctx, query_id=query)
                if needs_r
                else ScoredList(query_id=query, items=[])
            )
            generated = gen(query) if needs_g else []
            if retrieved.items or generated:
                fuse_k = strategy.k_ctx * (2 if strategy.mode in ("RG", "GR") else 1)
                docs = fuse(
                    retrieved,
                    generated,
                    FusionMode(strategy.mode),
                    fuse_k,
                    query_id=query,
                ).items

        prefix = " ".join(words[:start])
        parts = [d.text for d in docs]
        if prefix:
            parts.append(prefix)
        context = "\n\n".join(parts)
        result = client.score(
            ScoreRequest(context=context, continuation=" ".join(window))
        )
        logprobs.extend(result.logprobs)

    if not logprobs:
        raise EvalError("backend scored zero tokens")
    return math.exp(-sum(logprobs) / len(logprobs))


# --- reports -----------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-query metric values, their means, and run provenance."""

    per_query: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    run_meta: dict = field(default_factory=dict)

    @classmethod
    def from_per_query(
        cls, per_query: Mapping[str, Mapping[str, float]], run_meta: dict | None = None
    ) -> "EvalReport":
        totals: dict[str, list[float]] = {}
        for metrics in per_query.values():
            for metric, value in metrics.items():
                totals.setdefault(metric, []).append(float(value))
        aggregate = {
            metric: sum(values) / len(values) for metric, values in totals.items()
        }
        return cls(
            per_query={qid: dict(m) for qid, m in per_query.items()},
            aggregate=aggregate,
            run_meta=dict(run_meta or {}),
        )

    def merged_with(self, other: "EvalReport") -> "EvalReport":
        per_query = {qid: dict(m) for qid, m in self.per_query.items()}
        for qid, metrics in other.per_query.items():
            per_query.setdefault(qid, {}).update(metrics)
        aggregate = dict(self.aggregate)
        aggregate.update(other.aggregate)
        run_meta = dict(self.run_meta)
        run_meta.update(other.run_meta)
        return EvalReport(per_query=per_query, aggregate=aggregate, run_meta=run_meta)
