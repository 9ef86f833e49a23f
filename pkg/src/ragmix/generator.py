"""Question-conditioned document generation with a JSONL replay cache."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from ragmix.corpus import SOURCE_GENERATED, Passage
from ragmix.llm_client import CompletionRequest, LLMClient, run_bounded

DEFAULT_GEN_TEMPLATE = (
    "Generate a background document from Wikipedia to answer the given "
    "question.\n\nQuestion: {question}\n\nDocument:"
)


class GeneratorError(Exception):
    """Generation produced no usable documents."""


@dataclass(frozen=True)
class GenSpec:
    """Knobs for one generation pass."""

    n_docs: int = 5
    max_tokens: int = 128
    # None means: sample at 0.7 when asking for multiple docs, greedy for one.
    temperature: float | None = None
    prompt_template: str = DEFAULT_GEN_TEMPLATE

    def __post_init__(self) -> None:
        if self.n_docs < 1:
            raise ValueError(f"n_docs must be >= 1, got {self.n_docs}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        count = self.prompt_template.count("{question}")
        if count != 1:
            raise ValueError(
                f"prompt_template must contain {{question}} exactly once, "
                f"found {count}"
            )

    def resolved_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return 0.7 if self.n_docs > 1 else 0.0


def question_hash(question: str) -> str:
    return hashlib.sha256(question.encode("utf-8")).hexdigest()[:12]


def generate_docs(
    client: LLMClient, question: str, spec: GenSpec | None = None
) -> list[Passage]:
    """Generate spec.n_docs background documents for the question.

    An empty completion is regenerated once; a slot that stays empty is an
    error. Ids are stable for a fixed question and spec.
    """
    spec = spec or GenSpec()
    if not question.strip():
        raise GeneratorError("question is empty")
    prompt = spec.prompt_template.format(question=question)
    request = CompletionRequest(
        prompt=prompt,
        max_tokens=spec.max_tokens,
        temperature=spec.resolved_temperature(),
    )

    def one(_: int) -> str:
        text = client.complete(request).strip()
        if not text:
            text = client.complete(request).strip()
        return text

    texts = run_bounded(one, range(spec.n_docs), client.max_in_flight)
    empty = [i for i, text in enumerate(texts) if not text]
    if empty:
        raise GeneratorError(
            f"generation produced empty documents at slots {empty} "
            f"(after one retry each)"
        )
    qhash = question_hash(question)
    return [
        Passage(id=f"gen:{qhash}:{i}", text=text, source=SOURCE_GENERATED)
        for i, text in enumerate(texts)
    ]


def _passage_to_json(passage: Passage) -> dict:
    return {
        "id": passage.id,
        "text": passage.text,
        "title": passage.title,
        "source": passage.source,
    }


def _passage_from_json(row: Mapping) -> Passage:
    return Passage(
        id=row["id"],
        text=row["text"],
        title=row.get("title", ""),
        source=row.get("source", SOURCE_GENERATED),
    )


def write_gen_cache(
    entries: Mapping[str, list[Passage]] | Iterable[tuple[str, list[Passage]]],
    path: str | Path,
    backend: str,
) -> Path:
    """Write generated docs keyed by question id, one JSON object per line."""
    path = Path(path)
    if isinstance(entries, Mapping):
        entries = entries.items()
    lines = []
    for question_id, docs in entries:
        lines.append(
            json.dumps(
                {
                    "question_id": question_id,
                    "backend": backend,
                    "docs": [_passage_to_json(d) for d in docs],
                },
                ensure_ascii=False,
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_gen_cache(path: str | Path) -> dict[str, list[Passage]]:
    path = Path(path)
    cache: dict[str, list[Passage]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GeneratorError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
        if "question_id" not in row or "docs" not in row:
            raise GeneratorError(
                f"{path}: line {lineno}: expected 'question_id' and 'docs'"
            )
        cache[row["question_id"]] = [_passage_from_json(d) for d in row["docs"]]
    return cache
