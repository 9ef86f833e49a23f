"""In-context question answering and likelihood-based context selection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ragmix.corpus import Passage
from ragmix.fusion import ContextSet, FusionMode
from ragmix.llm_client import (
    CompletionRequest,
    LLMClient,
    LLMClientError,
    ScoreRequest,
)


@dataclass(frozen=True)
class QAPromptTemplate:
    """Building blocks of the reader prompt, concatenated in order."""

    preamble: str = (
        "Answer the question using the passages below. Keep the answer short.\n\n"
    )
    doc_block: str = "Title: {title}\nPassage: {text}\n\n"
    question_block: str = "Question: {question}\n"
    answer_cue: str = "Answer:"

    def __post_init__(self) -> None:
        for block_name, block, placeholder in (
            ("doc_block", self.doc_block, "{title}"),
            ("doc_block", self.doc_block, "{text}"),
            ("question_block", self.question_block, "{question}"),
        ):
            count = block.count(placeholder)
            if count != 1:
                raise ValueError(
                    f"{block_name} must contain {placeholder} exactly once, "
                    f"found {count}"
                )


@dataclass(frozen=True)
class QAResult:
    question_id: str
    prediction: str
    context_ids: tuple[str, ...]
    mode: FusionMode
    backend: str

    def __post_init__(self) -> None:
        if not self.context_ids:
            raise ValueError(f"question {self.question_id!r}: empty context_ids")


def build_prompt(
    question: str, ctx: ContextSet, template: QAPromptTemplate | None = None
) -> str:
    """Assemble the reader prompt: preamble, passages in ctx order, question, cue."""
    template = template or QAPromptTemplate()
    if not ctx.items:
        raise ValueError(f"query {ctx.query_id!r}: context set is empty")
    parts = [template.preamble]
    for passage in ctx.items:
        parts.append(template.doc_block.format(title=passage.title, text=passage.text))
    parts.append(template.question_block.format(question=question))
    parts.append(template.answer_cue)
    return "".join(parts)


def answer(
    client: LLMClient,
    question: str,
    ctx: ContextSet,
    template: QAPromptTemplate | None = None,
    max_tokens: int = 64,
) -> QAResult:
    """Answer the question from its context; the prediction is the first line."""
    prompt = build_prompt(question, ctx, template)
    try:
        completion = client.complete(
            CompletionRequest(prompt=prompt, max_tokens=max_tokens, stop=("\n",))
        )
    except LLMClientError as exc:
        raise type(exc)(f"question {ctx.query_id!r}: {exc}") from exc
    lines = completion.splitlines()
    prediction = lines[0].strip() if lines else ""
    return QAResult(
        question_id=ctx.query_id,
        prediction=prediction,
        context_ids=tuple(ctx.doc_ids()),
        mode=ctx.mode,
        backend=client.name,
    )


def select_best_context(
    client: LLMClient,
    question: str,
    retrieved: Sequence[Passage],
    generated: Sequence[Passage],
    gold_cue: str = "Question:",
) -> tuple[Passage, Passage]:
    """Pick the (retrieved, generated) pair that best predicts the question.

    Exhaustively scores every pair by the mean token log-likelihood of the
    question under [retrieved; generated; gold_cue]. Ties go to the lowest
    (retrieved index, generated index).
    """
    if not question.strip():
        raise ValueError("question is empty")
    if not retrieved or not generated:
        raise ValueError("need at least one retrieved and one generated passage")
    best: tuple[Passage, Passage] | None = None
    best_score = float("-inf")
    for r_doc in retrieved:
        for g_doc in generated:
            context = "\n".join(
                part for part in (r_doc.text, g_doc.text, gold_cue) if part
            )
            mean = client.score(
                ScoreRequest(context=context, continuation=question)
            ).mean()
            if best is None or mean > best_score:
                best = (r_doc, g_doc)
                best_score = mean
    assert best is not None
    return best


# --- predictions file --------------------------------------------------------


def write_predictions(results: Iterable[QAResult], path: str | Path) -> Path:
    path = Path(path)
    lines = [
        json.dumps(
            {
                "id": r.question_id,
                "prediction": r.prediction,
                "mode": r.mode.value,
                "context_ids": list(r.context_ids),
                "backend": r.backend,
            },
            ensure_ascii=False,
        )
        for r in results
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_predictions(path: str | Path) -> dict[str, QAResult]:
    path = Path(path)
    out: dict[str, QAResult] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
        for key in ("id", "prediction", "mode", "context_ids"):
            if key not in row:
                raise ValueError(f"{path}: line {lineno}: missing {key!r}")
        result = QAResult(
            question_id=row["id"],
            prediction=row["prediction"],
            context_ids=tuple(row["context_ids"]),
            mode=FusionMode(row["mode"]),
            backend=row.get("backend", ""),
        )
        out[result.question_id] = result
    return out
