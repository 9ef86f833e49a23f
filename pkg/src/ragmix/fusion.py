"""Merge retrieved and generated passages into ordered context sets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from ragmix.corpus import Passage
from ragmix.retriever import ScoredList


class FusionError(ValueError):
    """Nothing to fuse, or an invalid context set."""


class FusionMode(str, Enum):
    R = "R"            # retrieved only
    G = "G"            # generated only
    RG = "RG"          # retrieved block first, then generated
    GR = "GR"          # generated block first, then retrieved
    COMBINED = "COMBINED"  # full dedup'd union, no truncation


def _fold(text: str) -> str:
    # Case/whitespace folding used for duplicate detection.
    return " ".join(text.lower().split())


def dedup(docs: Sequence[Passage]) -> list[Passage]:
    """Drop passages whose folded text already appeared; first wins."""
    seen: set[str] = set()
    out: list[Passage] = []
    for doc in docs:
        key = _fold(doc.text)
        if key in seen:
            continue
        seen.add(key)
        out.append(doc)
    return out


@dataclass
class ContextSet:
    """The ordered passages handed to the reader for one query."""

    query_id: str
    mode: FusionMode
    items: list[Passage]
    k: int

    def __post_init__(self) -> None:
        if len(self.items) > self.k:
            raise FusionError(
                f"query {self.query_id!r}: {len(self.items)} items exceed k={self.k}"
            )
        folded = [_fold(p.text) for p in self.items]
        if len(set(folded)) != len(folded):
            raise FusionError(f"query {self.query_id!r}: duplicate passage texts")

    def doc_ids(self) -> list[str]:
        return [p.id for p in self.items]


def fuse(
    retrieved: ScoredList | None,
    generated: Sequence[Passage] | None,
    mode: FusionMode,
    k: int,
    balance: bool = False,
    query_id: str | None = None,
) -> ContextSet:
    """Combine the two passage lists according to mode, dedup'd and truncated.

    COMBINED keeps the whole union (retrieved order first) so a reranker can
    truncate later. The balance flag reserves ceil(k/2) slots for the leading
    block of RG/GR before the other block fills the rest.
    """
    if k < 1:
        raise FusionError(f"k must be >= 1, got {k}")
    mode = FusionMode(mode)
    r_docs = retrieved.passages() if retrieved is not None else []
    g_docs = list(generated or [])
    if not r_docs and not g_docs:
        raise FusionError("no context: both retrieved and generated are empty")
    qid = query_id if query_id is not None else (retrieved.query_id if retrieved else "")

    if mode is FusionMode.R:
        blocks = [r_docs]
    elif mode is FusionMode.G:
        blocks = [g_docs]
    elif mode is FusionMode.RG:
        blocks = [r_docs, g_docs]
    elif mode is FusionMode.GR:
        blocks = [g_docs, r_docs]
    else:  # COMBINED
        union = dedup(r_docs + g_docs)
        return ContextSet(query_id=qid, mode=mode, items=union, k=max(k, len(union)))

    picked: list[Passage] = []
    seen: set[str] = set()

    def take(block: Sequence[Passage], limit: int) -> None:
        for doc in block:
            if len(picked) >= limit:
                return
            key = _fold(doc.text)
            if key in seen:
                continue
            seen.add(key)
            picked.append(doc)

    if balance and len(blocks) == 2:
        take(blocks[0], math.ceil(k / 2))
        take(blocks[1], k)
        take(blocks[0], k)
    else:
        for block in blocks:
            take(block, k)
    return ContextSet(query_id=qid, mode=mode, items=picked, k=k)


# --- JSONL checkpoints -------------------------------------------------------


def context_to_json(ctx: ContextSet) -> dict:
    return {
        "query_id": ctx.query_id,
        "mode": ctx.mode.value,
        "k": ctx.k,
        "docs": [
            {"id": p.id, "text": p.text, "title": p.title, "source": p.source}
            for p in ctx.items
        ],
    }


def context_from_json(row: dict) -> ContextSet:
    for key in ("query_id", "mode", "docs"):
        if key not in row:
            raise FusionError(f"context row missing {key!r}")
    items = [
        Passage(
            id=d["id"],
            text=d["text"],
            title=d.get("title", ""),
            source=d.get("source", "retrieved"),
        )
        for d in row["docs"]
    ]
    return ContextSet(
        query_id=row["query_id"],
        mode=FusionMode(row["mode"]),
        items=items,
        k=int(row.get("k", max(len(items), 1))),
    )


def write_contexts(contexts: Iterable[ContextSet], path: str | Path) -> Path:
    path = Path(path)
    lines = [json.dumps(context_to_json(c), ensure_ascii=False) for c in contexts]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_contexts(path: str | Path) -> dict[str, ContextSet]:
    path = Path(path)
    out: dict[str, ContextSet] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FusionError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
        ctx = context_from_json(row)
        out[ctx.query_id] = ctx
    return out
