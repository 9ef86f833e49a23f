"""Sparse BM25 retrieval over an inverted index and exact dense retrieval."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ragmix.corpus import (
    SOURCE_RETRIEVED,
    Corpus,
    Passage,
    TokenizerConfig,
    tokenize,
)


class RetrieverError(ValueError):
    """Invalid retrieval input or a corrupt index file."""


@dataclass(frozen=True)
class BM25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise RetrieverError(f"k1 must be positive, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise RetrieverError(f"b must be in [0, 1], got {self.b}")


@dataclass
class ScoredList:
    """A ranked list of passages for one query; scores are non-increasing."""

    query_id: str
    items: list[tuple[Passage, float]]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        prev = math.inf
        for passage, score in self.items:
            if passage.id in seen:
                raise RetrieverError(
                    f"query {self.query_id!r}: duplicate passage id {passage.id!r}"
                )
            seen.add(passage.id)
            if score > prev:
                raise RetrieverError(
                    f"query {self.query_id!r}: scores must be non-increasing"
                )
            prev = score

    def passages(self) -> list[Passage]:
        return [p for p, _ in self.items]

    def doc_ids(self) -> list[str]:
        return [p.id for p, _ in self.items]


@dataclass
class InvertedIndex:
    """Term postings plus the per-document data BM25 needs."""

    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc ordinal, tf)]
    doc_lengths: list[int]
    doc_count: int
    avg_doc_len: float
    doc_ids: list[str]
    ordinals: dict[str, int] = field(repr=False)
    doc_passages: list[Passage] = field(repr=False)
    params: BM25Params = field(default_factory=BM25Params)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)


def build_index(
    corpus: Corpus,
    cfg: TokenizerConfig | None = None,
    params: BM25Params | None = None,
) -> InvertedIndex:
    """Build an inverted index over the corpus passages."""
    cfg = cfg or TokenizerConfig()
    params = params or BM25Params()
    if not corpus.passages:
        raise RetrieverError("cannot index an empty corpus")

    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: list[int] = []
    doc_ids: list[str] = []
    passages: list[Passage] = []
    for ordinal, passage in enumerate(corpus.passages):
        tokens = tokenize(passage.text, cfg)
        doc_lengths.append(len(tokens))
        doc_ids.append(passage.id)
        passages.append(passage)
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((ordinal, tf))

    n = len(doc_ids)
    return InvertedIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        doc_count=n,
        avg_doc_len=sum(doc_lengths) / n,
        doc_ids=doc_ids,
        ordinals={doc_id: i for i, doc_id in enumerate(doc_ids)},
        doc_passages=passages,
        params=params,
        tokenizer=cfg,
    )


def _idf(index: InvertedIndex, term: str) -> float:
    df = len(index.postings.get(term, ()))
    n = index.doc_count
    return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def _term_weight(index: InvertedIndex, term: str, tf: int, doc_len: int) -> float:
    k1 = index.params.k1
    b = index.params.b
    norm = 1.0 - b + b * doc_len / index.avg_doc_len
    return _idf(index, term) * tf * (k1 + 1.0) / (tf + k1 * norm)


def bm25_score(index: InvertedIndex, query_terms: Sequence[str], doc: int) -> float:
    """BM25 score of one document for a tokenized query.

    Terms absent from the document (or the whole corpus) contribute zero.
    """
    if not 0 <= doc < index.doc_count:
        raise RetrieverError(f"unknown document ordinal {doc}")
    doc_len = index.doc_lengths[doc]
    score = 0.0
    for term in query_terms:
        tf = 0
        for ordinal, term_tf in index.postings.get(term, ()):
            if ordinal == doc:
                tf = term_tf
                break
        if tf:
            score += _term_weight(index, term, tf, doc_len)
    return score


def search(
    index: InvertedIndex, query: str, k: int, query_id: str | None = None
) -> ScoredList:
    """Top-k BM25 search; ties break by ascending document ordinal.

    Accumulation order matches bm25_score (query term by query term), so the
    two paths agree float-for-float.
    """
    if k < 1:
        raise RetrieverError(f"k must be >= 1, got {k}")
    terms = tokenize(query, index.tokenizer)
    scores: dict[int, float] = {}
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        for ordinal, tf in plist:
            weight = _term_weight(index, term, tf, index.doc_lengths[ordinal])
            scores[ordinal] = scores.get(ordinal, 0.0) + weight
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
    items = [(index.doc_passages[ordinal], score) for ordinal, score in ranked]
    return ScoredList(query_id=query_id if query_id is not None else query, items=items)


# --- dense retrieval ---------------------------------------------------------


@dataclass
class EmbeddingStore:
    """Document vectors keyed by id, with an optional passage lookup for texts."""

    dim: int
    ids: list[str]
    matrix: np.ndarray
    passages: dict[str, Passage] | None = None

    def attach_corpus(self, corpus: Corpus) -> "EmbeddingStore":
        self.passages = corpus.by_id()
        return self


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Read a vector store: a ``dim=<int>`` header, then id<TAB>comma-floats rows."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise RetrieverError(f"{path}: missing 'dim=<int>' header")
    try:
        dim = int(lines[0][len("dim="):])
    except ValueError as exc:
        raise RetrieverError(f"{path}: bad dimension header {lines[0]!r}") from exc
    if dim < 1:
        raise RetrieverError(f"{path}: dimension must be >= 1, got {dim}")

    ids: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise RetrieverError(f"{path}: line {lineno}: expected id<TAB>values")
        doc_id, values = fields
        if doc_id in seen:
            raise RetrieverError(f"{path}: line {lineno}: duplicate id {doc_id!r}")
        seen.add(doc_id)
        try:
            vector = [float(v) for v in values.split(",")]
        except ValueError as exc:
            raise RetrieverError(f"{path}: line {lineno}: bad float") from exc
        if len(vector) != dim:
            raise RetrieverError(
                f"{path}: line {lineno}: expected {dim} values, got {len(vector)}"
            )
        ids.append(doc_id)
        rows.append(vector)
    if not ids:
        raise RetrieverError(f"{path}: no vectors")
    return EmbeddingStore(dim=dim, ids=ids, matrix=np.array(rows, dtype=np.float64))


def save_embeddings(store: EmbeddingStore, path: str | Path) -> Path:
    path = Path(path)
    lines = [f"dim={store.dim}"]
    for doc_id, row in zip(store.ids, store.matrix):
        lines.append(doc_id + "\t" + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def dense_search(
    store: EmbeddingStore,
    query_vec: Sequence[float],
    k: int,
    query_id: str = "",
) -> ScoredList:
    """Exact top-k by dot product; ties break by lexicographic doc id."""
    if k < 1:
        raise RetrieverError(f"k must be >= 1, got {k}")
    if len(query_vec) != store.dim:
        raise RetrieverError(
            f"query vector has dim {len(query_vec)}, store has dim {store.dim}"
        )
    scores = store.matrix @ np.asarray(query_vec, dtype=np.float64)
    order = sorted(range(len(store.ids)), key=lambda i: (-scores[i], store.ids[i]))[:k]
    items = []
    for i in order:
        doc_id = store.ids[i]
        passage = (store.passages or {}).get(doc_id) or Passage(
            id=doc_id, text=doc_id, source=SOURCE_RETRIEVED
        )
        items.append((passage, float(scores[i])))
    return ScoredList(query_id=query_id, items=items)


# --- index persistence -------------------------------------------------------

_MAGIC = b"RGMX"
_VERSION = 1


def _pack_str(out: bytearray, value: str) -> None:
    data = value.encode("utf-8")
    out += struct.pack("<I", len(data))
    out += data


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise RetrieverError("truncated index file")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def take_str(self) -> str:
        (length,) = self.take("<I")
        if self.pos + length > len(self.data):
            raise RetrieverError("truncated index file")
        value = self.data[self.pos : self.pos + length].decode("utf-8")
        self.pos += length
        return value


def save_index(index: InvertedIndex, path: str | Path) -> Path:
    """Serialize the index to a single little-endian binary file."""
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<B", _VERSION)
    out += struct.pack("<dd", index.params.k1, index.params.b)
    cfg = index.tokenizer
    out += struct.pack(
        "<BBBI", int(cfg.lowercase), int(cfg.strip_accents), int(cfg.stem),
        cfg.min_token_len,
    )
    out += struct.pack("<I", index.doc_count)
    for ordinal in range(index.doc_count):
        passage = index.doc_passages[ordinal]
        _pack_str(out, passage.id)
        _pack_str(out, passage.title)
        _pack_str(out, passage.text)
        out += struct.pack("<B", 0 if passage.source == SOURCE_RETRIEVED else 1)
        out += struct.pack("<I", index.doc_lengths[ordinal])
    out += struct.pack("<I", len(index.postings))
    for term in sorted(index.postings):
        _pack_str(out, term)
        plist = index.postings[term]
        out += struct.pack("<I", len(plist))
        for ordinal, tf in plist:
            out += struct.pack("<II", ordinal, tf)
    path = Path(path)
    path.write_bytes(bytes(out))
    return path


def load_index(path: str | Path) -> InvertedIndex:
    path = Path(path)
    reader = _Reader(path.read_bytes())
    if reader.data[:4] != _MAGIC:
        raise RetrieverError(f"{path}: not an index file (bad magic)")
    reader.pos = 4
    (version,) = reader.take("<B")
    if version != _VERSION:
        raise RetrieverError(f"{path}: unsupported index version {version}")
    k1, b = reader.take("<dd")
    lowercase, strip_accents, stem, min_token_len = reader.take("<BBBI")
    cfg = TokenizerConfig(
        lowercase=bool(lowercase),
        strip_accents=bool(strip_accents),
        min_token_len=min_token_len,
        stem=bool(stem),
    )
    (doc_count,) = reader.take("<I")
    doc_ids: list[str] = []
    doc_lengths: list[int] = []
    passages: list[Passage] = []
    for _ in range(doc_count):
        doc_id = reader.take_str()
        title = reader.take_str()
        text = reader.take_str()
        (source_flag,) = reader.take("<B")
        (doc_len,) = reader.take("<I")
        doc_ids.append(doc_id)
        doc_lengths.append(doc_len)
        passages.append(
            Passage(
                id=doc_id,
                text=text,
                title=title,
                source=SOURCE_RETRIEVED if source_flag == 0 else "generated",
            )
        )
    (term_count,) = reader.take("<I")
    postings: dict[str, list[tuple[int, int]]] = {}
    for _ in range(term_count):
        term = reader.take_str()
        (n_postings,) = reader.take("<I")
        plist = []
        for _ in range(n_postings):
            ordinal, tf = reader.take("<II")
            plist.append((ordinal, tf))
        postings[term] = plist
    if reader.pos != len(reader.data):
        raise RetrieverError(f"{path}: trailing bytes after index data")
    if doc_count == 0:
        raise RetrieverError(f"{path}: index contains no documents")
    return InvertedIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        doc_count=doc_count,
        avg_doc_len=sum(doc_lengths) / doc_count,
        doc_ids=doc_ids,
        ordinals={doc_id: i for i, doc_id in enumerate(doc_ids)},
        doc_passages=passages,
        params=BM25Params(k1=k1, b=b),
        tokenizer=cfg,
    )


# --- TREC run files ----------------------------------------------------------


def write_trec_run(
    results: Mapping[str, ScoredList], path: str | Path, tag: str = "ragmix"
) -> Path:
    """Write ranked results as TREC run lines: qid Q0 docid rank score tag."""
    lines = []
    for qid in results:
        for rank, (passage, score) in enumerate(results[qid].items, start=1):
            lines.append(f"{qid} Q0 {passage.id} {rank} {score:.6f} {tag}")
    path = Path(path)
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_trec_run(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    """Read a TREC run file into qid -> [(docid, score)] in rank order."""
    path = Path(path)
    run: dict[str, list[tuple[str, float]]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 6:
            raise RetrieverError(f"{path}: line {lineno}: expected 6 fields")
        qid, _, doc_id, _, score, _ = fields
        try:
            run.setdefault(qid, []).append((doc_id, float(score)))
        except ValueError as exc:
            raise RetrieverError(f"{path}: line {lineno}: bad score") from exc
    return run


def run_to_scored_lists(
    run: Mapping[str, Sequence[tuple[str, float]]],
    lookup: Mapping[str, Passage] | None = None,
) -> dict[str, ScoredList]:
    """Turn raw run rows into ScoredLists, resolving texts via lookup when given."""
    results: dict[str, ScoredList] = {}
    for qid, rows in run.items():
        items = []
        for doc_id, score in rows:
            passage = (lookup or {}).get(doc_id) or Passage(id=doc_id, text=doc_id)
            items.append((passage, score))
        results[qid] = ScoredList(query_id=qid, items=items)
    return results
