"""Toolkit for retrieval-augmented generation experiments.

Provides sparse and dense retrieval, LLM-backed document generation, context
fusion, zero-shot reranking, in-context question answering, and evaluation
utilities, all runnable offline against deterministic mock clients.
"""

from ragmix.corpus import (
    Corpus,
    Passage,
    QAExample,
    TokenizerConfig,
    load_corpus,
    load_qa_examples,
    normalize_answer,
    tokenize,
    write_corpus,
)
from ragmix.fusion import ContextSet, FusionMode, fuse
from ragmix.llm_client import (
    CompletionRequest,
    HTTPClient,
    LLMClient,
    MockEchoClient,
    MockUniformClient,
    ScoreRequest,
    ScriptedClient,
    TokenLogProbs,
)
from ragmix.retriever import (
    BM25Params,
    EmbeddingStore,
    InvertedIndex,
    ScoredList,
    bm25_score,
    build_index,
    dense_search,
    load_index,
    save_index,
    search,
)

__version__ = "0.1.0"

__all__ = [
    "BM25Params",
    "CompletionRequest",
    "ContextSet",
    "Corpus",
    "EmbeddingStore",
    "FusionMode",
    "HTTPClient",
    "InvertedIndex",
    "LLMClient",
    "MockEchoClient",
    "MockUniformClient",
    "Passage",
    "QAExample",
    "ScoreRequest",
    "ScoredList",
    "ScriptedClient",
    "TokenLogProbs",
    "TokenizerConfig",
    "bm25_score",
    "build_index",
    "dense_search",
    "fuse",
    "load_corpus",
    "load_index",
    "load_qa_examples",
    "normalize_answer",
    "save_index",
    "search",
    "tokenize",
    "write_corpus",
]
