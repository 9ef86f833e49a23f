"""Sparse and dense retrieval: scoring math, search, persistence."""

from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragmix.corpus import Corpus, Passage, TokenizerConfig, tokenize
from ragmix.retriever import (
    BM25Params,
    EmbeddingStore,
    InvertedIndex,
    RetrieverError,
    ScoredList,
    bm25_score,
    build_index,
    dense_search,
    load_embeddings,
    load_index,
    read_trec_run,
    run_to_scored_lists,
    save_embeddings,
    save_index,
    search,
    write_trec_run,
)


def toy_corpus() -> Corpus:
    return Corpus.from_passages(
        [
            Passage(id="d1", text="cat sat"),
            Passage(id="d2", text="dog ran"),
            Passage(id="d3", text="cat ran"),
        ]
    )


def pairs(scored: ScoredList) -> list[tuple[str, float]]:
    return [(p.id, s) for p, s in scored.items]


def sl(query_id: str, *items: tuple[str, float]) -> ScoredList:
    return ScoredList(
        query_id=query_id,
        items=[(Passage(id=d, text=d), s) for d, s in items],
    )


def brute_force_rank(index: InvertedIndex, query: str, k: int):
    """Reference ranking: score every doc independently, sort by (-score, ordinal).

    Mirrors the documented ranking rule without going through search().
    """
    terms = tokenize(query, index.tokenizer)
    scored = []
    for ordinal in range(index.doc_count):
        s = bm25_score(index, terms, ordinal)
        if s > 0.0:
            scored.append((ordinal, s))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [(index.doc_ids[o], s) for o, s in scored[:k]]


class TestBM25Math:
    def test_single_match_closed_form(self):
        # One of three docs holds the term once; doc length equals the average
        # so the length normalizer is 1 and the tf factor reduces to 1.
        # Score is just idf = ln(1 + (3 - 1 + 0.5) / (1 + 0.5)).
        index = build_index(toy_corpus())
        score = bm25_score(index, ["dog"], 1)
        assert score == pytest.approx(math.log(1 + (3 - 1 + 0.5) / (1 + 0.5)), abs=1e-12)

    def test_single_doc_single_term(self):
        corpus = Corpus.from_passages([Passage(id="d1", text="cat")])
        index = build_index(corpus)
        # idf = ln(1 + (1 - 1 + 0.5) / (1 + 0.5)) = ln(4/3); tf factor is 1.
        assert bm25_score(index, ["cat"], 0) == pytest.approx(math.log(4 / 3), abs=1e-9)

    def test_absent_term_scores_zero(self):
        index = build_index(toy_corpus())
        assert bm25_score(index, ["zebra"], 0) == 0.0

    def test_repeated_query_term_adds(self):
        index = build_index(toy_corpus())
        one = bm25_score(index, ["cat"], 0)
        two = bm25_score(index, ["cat", "cat"], 0)
        assert two == pytest.approx(2 * one, abs=1e-12)

    def test_unknown_ordinal(self):
        index = build_index(toy_corpus())
        with pytest.raises(RetrieverError, match="unknown document ordinal"):
            bm25_score(index, ["cat"], 3)

    def test_length_normalization_direction(self):
        # Same tf, longer doc scores lower when b > 0.
        corpus = Corpus.from_passages(
            [
                Passage(id="short", text="cat"),
                Passage(id="long", text="cat filler filler filler filler"),
            ]
        )
        index = build_index(corpus)
        assert bm25_score(index, ["cat"], 0) > bm25_score(index, ["cat"], 1)

    def test_b_zero_ignores_length(self):
        corpus = Corpus.from_passages(
            [
                Passage(id="short", text="cat"),
                Passage(id="long", text="cat filler filler filler filler"),
            ]
        )
        index = build_index(corpus, params=BM25Params(k1=0.9, b=0.0))
        assert bm25_score(index, ["cat"], 0) == pytest.approx(
            bm25_score(index, ["cat"], 1), abs=1e-12
        )

    def test_param_validation(self):
        with pytest.raises(RetrieverError):
            BM25Params(k1=-0.1, b=0.4)
        with pytest.raises(RetrieverError):
            BM25Params(k1=0.9, b=1.5)


class TestSearch:
    def test_toy_ranking(self):
        index = build_index(toy_corpus())
        hits = search(index, "cat ran", 5)
        # d3 matches both terms; d1/d2 one each. Among single-term matches the
        # scores are equal by symmetry (same df, same doc length), tie broken
        # by insertion order.
        assert hits.doc_ids() == ["d3", "d1", "d2"]
        assert hits.items[1][1] == pytest.approx(hits.items[2][1], abs=1e-12)

    def test_k_truncates(self):
        index = build_index(toy_corpus())
        assert len(search(index, "cat ran", 1).items) == 1

    def test_no_match_empty(self):
        index = build_index(toy_corpus())
        assert search(index, "zebra", 5).items == []

    def test_k_must_be_positive(self):
        index = build_index(toy_corpus())
        with pytest.raises(RetrieverError, match="k"):
            search(index, "cat", 0)

    def test_query_id_defaults_to_query(self):
        index = build_index(toy_corpus())
        assert search(index, "cat", 1).query_id == "cat"
        assert search(index, "cat", 1, query_id="q7").query_id == "q7"

    def test_matches_brute_force_on_random_corpora(self):
        rng = random.Random(1311)
        vocab = [f"w{i}" for i in range(30)]
        for trial in range(25):
            n_docs = rng.randint(1, 40)
            passages = [
                Passage(
                    id=f"d{i}",
                    text=" ".join(rng.choices(vocab, k=rng.randint(1, 12))),
                )
                for i in range(n_docs)
            ]
            index = build_index(Corpus.from_passages(passages))
            for _ in range(8):
                query = " ".join(rng.choices(vocab, k=rng.randint(1, 5)))
                k = rng.randint(1, 10)
                got = pairs(search(index, query, k))
                want = brute_force_rank(index, query, k)
                assert got == want, f"trial {trial} query {query!r}"

    def test_stemmed_index_matches_inflected_query(self):
        corpus = Corpus.from_passages([Passage(id="d1", text="running dogs")])
        index = build_index(corpus, cfg=TokenizerConfig(stem=True))
        assert search(index, "runs dog", 5).doc_ids() == ["d1"]

    def test_search_returns_real_passages(self):
        index = build_index(toy_corpus())
        hits = search(index, "cat", 5)
        assert hits.passages()[0].text == "cat sat"


class TestScoredList:
    def test_rejects_increasing_scores(self):
        with pytest.raises(RetrieverError, match="non-increasing"):
            sl("q", ("d1", 0.5), ("d2", 0.9))

    def test_rejects_duplicate_ids(self):
        with pytest.raises(RetrieverError, match="duplicate"):
            sl("q", ("d1", 0.9), ("d1", 0.5))

    def test_equal_scores_fine(self):
        assert sl("q", ("d1", 0.5), ("d2", 0.5)).doc_ids() == ["d1", "d2"]


class TestIndexPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        corpus = Corpus.from_passages(
            [
                Passage(id="d1", text="cat sat on the mat", title="t1"),
                Passage(id="d2", text="dogs RAN far", title=""),
                Passage(id="gen:abc:0", text="made up text", source="generated"),
            ]
        )
        index = build_index(corpus, params=BM25Params(k1=1.2, b=0.75))
        path = save_index(index, tmp_path / "idx.bin")
        loaded = load_index(path)

        assert loaded.postings == index.postings
        assert loaded.doc_lengths == index.doc_lengths
        assert loaded.doc_ids == index.doc_ids
        assert loaded.params == index.params
        assert loaded.tokenizer == index.tokenizer
        assert loaded.avg_doc_len == index.avg_doc_len
        assert loaded.doc_passages == index.doc_passages

        # Scores must agree bit for bit, not approximately.
        for query in ("cat", "dogs ran", "mat far cat"):
            assert pairs(search(index, query, 10)) == pairs(search(loaded, query, 10))

    def test_save_twice_identical_bytes(self, tmp_path):
        index = build_index(toy_corpus())
        p1 = save_index(index, tmp_path / "a.bin")
        p2 = save_index(index, tmp_path / "b.bin")
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(RetrieverError, match="not an index file"):
            load_index(path)

    def test_truncated_file(self, tmp_path):
        index = build_index(toy_corpus())
        path = save_index(index, tmp_path / "idx.bin")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(RetrieverError, match="truncated"):
            load_index(path)

    def test_trailing_garbage(self, tmp_path):
        index = build_index(toy_corpus())
        path = save_index(index, tmp_path / "idx.bin")
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(RetrieverError, match="trailing"):
            load_index(path)


class TestDense:
    def store(self) -> EmbeddingStore:
        matrix = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]], dtype=np.float64)
        return EmbeddingStore(dim=2, ids=["d1", "d2", "d3"], matrix=matrix)

    def test_dot_product_ranking(self):
        hits = dense_search(self.store(), np.array([1.0, 1.0]), 3)
        assert hits.doc_ids() == ["d3", "d1", "d2"]
        assert hits.items[0][1] == 7.0

    def test_ties_break_by_id(self):
        matrix = np.array([[1.0, 0.0], [1.0, 0.0]], dtype=np.float64)
        store = EmbeddingStore(dim=2, ids=["b", "a"], matrix=matrix)
        hits = dense_search(store, np.array([2.0, 0.0]), 2)
        assert hits.doc_ids() == ["a", "b"]

    def test_dim_mismatch(self):
        with pytest.raises(RetrieverError, match="dim"):
            dense_search(self.store(), np.array([1.0, 2.0, 3.0]), 2)

    def test_attached_corpus_resolves_texts(self):
        corpus = Corpus.from_passages([Passage(id="d3", text="real text")])
        store = self.store().attach_corpus(corpus)
        hits = dense_search(store, np.array([1.0, 1.0]), 1)
        assert hits.passages()[0].text == "real text"

    def test_round_trip(self, tmp_path):
        store = self.store()
        path = save_embeddings(store, tmp_path / "emb.tsv")
        loaded = load_embeddings(path)
        assert loaded.ids == store.ids
        assert loaded.dim == store.dim
        assert np.array_equal(loaded.matrix, store.matrix)

    def test_round_trip_awkward_floats(self, tmp_path):
        matrix = np.array([[0.1, -1 / 3], [1e-17, 2**52 + 0.5]], dtype=np.float64)
        store = EmbeddingStore(dim=2, ids=["a", "b"], matrix=matrix)
        loaded = load_embeddings(save_embeddings(store, tmp_path / "emb.tsv"))
        assert np.array_equal(loaded.matrix, matrix)

    def test_load_errors_name_lines(self, tmp_path):
        path = tmp_path / "emb.tsv"
        path.write_text("dim=2\nd1\t1.0,2.0\nd2\t1.0\n")
        with pytest.raises(RetrieverError, match="line 3"):
            load_embeddings(path)

    def test_load_duplicate_id(self, tmp_path):
        path = tmp_path / "emb.tsv"
        path.write_text("dim=1\nd1\t1.0\nd1\t2.0\n")
        with pytest.raises(RetrieverError, match="'d1'"):
            load_embeddings(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "emb.tsv"
        path.write_text("d1\t1.0\n")
        with pytest.raises(RetrieverError, match="dim="):
            load_embeddings(path)

    @settings(max_examples=50)
    @given(
        st.integers(min_value=1, max_value=6),
        st.integers(min_value=1, max_value=20),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_matches_exhaustive_dot_products(self, dim, n_docs, seed):
        rng = np.random.default_rng(seed)
        matrix = rng.integers(-5, 6, size=(n_docs, dim)).astype(np.float64)
        ids = [f"d{i:03d}" for i in range(n_docs)]
        store = EmbeddingStore(dim=dim, ids=ids, matrix=matrix)
        query = rng.integers(-5, 6, size=dim).astype(np.float64)
        k = min(5, n_docs)
        hits = dense_search(store, query, k)
        # Integer-valued vectors keep the dot products exact, so the oracle
        # ordering is unambiguous.
        dots = {
            ids[i]: float(sum(matrix[i][j] * query[j] for j in range(dim)))
            for i in range(n_docs)
        }
        want = sorted(dots.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
        assert pairs(hits) == want


class TestTrecRun:
    def test_round_trip(self, tmp_path):
        results = {
            "q1": sl("q1", ("d3", 1.5), ("d1", 0.25)),
            "q2": sl("q2", ("d2", 0.125)),
        }
        path = write_trec_run(results, tmp_path / "run.txt", tag="bm25")
        assert path.read_text().splitlines()[0] == "q1 Q0 d3 1 1.500000 bm25"
        back = run_to_scored_lists(read_trec_run(path))
        assert list(back) == ["q1", "q2"]
        assert back["q1"].doc_ids() == ["d3", "d1"]
        assert back["q2"].items[0][1] == 0.125

    def test_rank_column_sequential(self, tmp_path):
        results = {"q1": sl("q1", ("a", 3.0), ("b", 2.0), ("c", 1.0))}
        path = write_trec_run(results, tmp_path / "run.txt", tag="t")
        ranks = [int(line.split()[3]) for line in path.read_text().splitlines()]
        assert ranks == [1, 2, 3]

    def test_read_rejects_malformed(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("q1 Q0 d1 1 0.5\n")
        with pytest.raises(RetrieverError, match="line 1"):
            read_trec_run(path)

    def test_lookup_resolves_passages(self, tmp_path):
        results = {"q1": sl("q1", ("d1", 1.0))}
        path = write_trec_run(results, tmp_path / "run.txt")
        lookup = {"d1": Passage(id="d1", text="actual words")}
        back = run_to_scored_lists(read_trec_run(path), lookup)
        assert back["q1"].passages()[0].text == "actual words"
