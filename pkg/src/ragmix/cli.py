"""Command-line interface and the manifest-driven pipeline runner."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import tempfile
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from ragmix.corpus import (
    Corpus,
    CorpusError,
    QAExample,
    TokenizerConfig,
    load_corpus,
    load_qa_examples,
)
from ragmix.evaluation import (
    EvalError,
    EvalReport,
    PPLStrategy,
    answer_recall,
    containment,
    exact_match,
    load_qrels,
    ndcg_per_query,
    perplexity,
    topk_hits,
)
from ragmix.fusion import (
    ContextSet,
    FusionError,
    FusionMode,
    fuse,
    load_contexts,
    write_contexts,
)
from ragmix.generator import GeneratorError, GenSpec, generate_docs, load_gen_cache, write_gen_cache
from ragmix.llm_client import HTTPClient, LLMClient, LLMClientError, build_client
from ragmix.ragqa import (
    QAPromptTemplate,
    QAResult,
    answer as answer_question,
    load_predictions,
    write_predictions,
)
from ragmix.report import write_report
from ragmix.rerank import RankGPTConfig, UPRConfig, rankgpt_rerank, upr_rerank
from ragmix.retriever import (
    BM25Params,
    InvertedIndex,
    RetrieverError,
    ScoredList,
    build_index,
    dense_search,
    load_embeddings,
    load_index,
    read_trec_run,
    run_to_scored_lists,
    save_index,
    search,
    write_trec_run,
)


class ManifestError(ValueError):
    """The manifest failed validation before execution."""


_QA_METRICS = ("em", "recall", "con", "topk")
_STAGE_NAMES = (
    "retrieve",
    "generate",
    "fuse",
    "rerank",
    "answer",
    "eval-qa",
    "eval-ir",
    "eval-ppl",
)


# --- manifest validation -----------------------------------------------------


def _tokenizer_from(cfg: dict) -> TokenizerConfig:
    return TokenizerConfig(
        lowercase=bool(cfg.get("lowercase", True)),
        strip_accents=bool(cfg.get("strip_accents", True)),
        min_token_len=int(cfg.get("min_token_len", 1)),
        stem=bool(cfg.get("stem", False)),
    )


def _genspec_from(cfg: dict) -> GenSpec:
    kwargs: dict = {}
    for key in ("n_docs", "max_tokens"):
        if key in cfg:
            kwargs[key] = int(cfg[key])
    if "temperature" in cfg and cfg["temperature"] is not None:
        kwargs["temperature"] = float(cfg["temperature"])
    if "prompt_template" in cfg:
        kwargs["prompt_template"] = cfg["prompt_template"]
    return GenSpec(**kwargs)


def _qa_template_from(cfg: dict) -> QAPromptTemplate:
    kwargs = {
        key: cfg[key]
        for key in ("preamble", "doc_block", "question_block", "answer_cue")
        if key in cfg
    }
    return QAPromptTemplate(**kwargs)


def validate_manifest(manifest: dict) -> None:
    """Check the whole manifest up front; nothing runs if any stage is bad."""
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    if "corpus" not in manifest:
        raise ManifestError("manifest is missing 'corpus'")
    stages = manifest.get("stages")
    if not isinstance(stages, list) or not stages:
        raise ManifestError("manifest needs a non-empty 'stages' list")
    backend = manifest.get("backend", {})
    if not isinstance(backend, dict):
        raise ManifestError("'backend' must be an object")

    have: set[str] = set()
    for position, stage in enumerate(stages):
        if not isinstance(stage, dict) or "stage" not in stage:
            raise ManifestError(f"stage {position}: missing 'stage' name")
        name = stage["stage"]
        if name not in _STAGE_NAMES:
            raise ManifestError(f"stage {position}: unknown stage {name!r}")
        try:
            _validate_stage(name, stage, have, manifest)
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"stage {position} ({name}): {exc}") from exc
        have.add(name)


def _validate_stage(name: str, stage: dict, have: set[str], manifest: dict) -> None:
    needs_dataset = name in ("retrieve", "generate", "fuse", "rerank", "answer", "eval-qa")
    if needs_dataset and "dataset" not in manifest:
        raise ManifestError(f"stage {name!r} needs a manifest 'dataset'")
    if name == "retrieve":
        retriever = stage.get("retriever", "bm25")
        if retriever not in ("bm25", "dense"):
            raise ManifestError(f"unknown retriever {retriever!r}")
        if int(stage.get("k", 10)) < 1:
            raise ManifestError("k must be >= 1")
        if retriever == "bm25":
            BM25Params(
                k1=float(stage.get("k1", 0.9)), b=float(stage.get("b", 0.4))
            )
            _tokenizer_from(stage)
        else:
            for key in ("embeddings", "query_embeddings"):
                if key not in stage:
                    raise ManifestError(f"dense retrieval needs {key!r}")
    elif name == "generate":
        _genspec_from(stage)
    elif name == "fuse":
        mode = FusionMode(stage.get("mode", "RG"))
        if int(stage.get("k", 5)) < 1:
            raise ManifestError("k must be >= 1")
        if mode in (FusionMode.R, FusionMode.RG, FusionMode.GR, FusionMode.COMBINED):
            if "retrieve" not in have:
                raise ManifestError(f"mode {mode.value} needs a retrieve stage first")
        if mode in (FusionMode.G, FusionMode.RG, FusionMode.GR, FusionMode.COMBINED):
            if "generate" not in have:
                raise ManifestError(f"mode {mode.value} needs a generate stage first")
    elif name == "rerank":
        method = stage.get("method", "upr")
        if method == "upr":
            UPRConfig(**{k: stage[k] for k in ("template", "question_prefix") if k in stage})
        elif method == "rankgpt":
            RankGPTConfig(
                window_size=int(stage.get("window_size", 20)),
                stride=int(stage.get("stride", 10)),
            )
        else:
            raise ManifestError(f"unknown rerank method {method!r}")
        if "retrieve" not in have and "fuse" not in have:
            raise ManifestError("rerank needs a retrieve or fuse stage first")
    elif name == "answer":
        _qa_template_from(stage)
        if "retrieve" not in have and "fuse" not in have:
            raise ManifestError("answer needs a retrieve or fuse stage first")
    elif name == "eval-qa":
        metrics = stage.get("metrics", ["em", "recall", "con"])
        unknown = [m for m in metrics if m not in _QA_METRICS]
        if unknown:
            raise ManifestError(f"unknown metrics {unknown}")
        if not metrics:
            raise ManifestError("empty metrics list")
        if any(m in ("em", "recall", "con") for m in metrics) and "answer" not in have:
            raise ManifestError("answer metrics need an answer stage first")
        if "topk" in metrics:
            if "retrieve" not in have and "rerank" not in have:
                raise ManifestError("topk needs a retrieve or rerank stage first")
            if any(int(k) < 1 for k in stage.get("ks", [1, 5])):
                raise ManifestError("all ks must be >= 1")
    elif name == "eval-ir":
        if "qrels" not in stage:
            raise ManifestError("eval-ir needs 'qrels'")
        if int(stage.get("k", 10)) < 1:
            raise ManifestError("k must be >= 1")
        if not ({"retrieve", "fuse", "rerank"} & have):
            raise ManifestError("eval-ir needs ranked results from an earlier stage")
    elif name == "eval-ppl":
        if "text" not in stage:
            raise ManifestError("eval-ppl needs 'text'")
        for mode in stage.get("strategies", ["none"]):
            PPLStrategy(
                mode=mode,
                retrieval_stride=int(stage.get("retrieval_stride", 32)),
                query_len=int(stage.get("query_len", 32)),
                k_ctx=int(stage.get("k_ctx", 1)),
            )


# --- manifest execution ------------------------------------------------------


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class _Run:
    """Execution state threaded through the pipeline stages."""

    def __init__(
        self,
        manifest: dict,
        base_dir: Path,
        out_dir: Path,
        client: LLMClient,
        force: bool,
    ) -> None:
        self.manifest = manifest
        self.base_dir = base_dir
        self.out_dir = out_dir
        self.client = client
        self.force = force
        self.corpus: Corpus = load_corpus(self._path(manifest["corpus"]))
        self.examples: list[QAExample] | None = None
        if "dataset" in manifest:
            self.examples = load_qa_examples(self._path(manifest["dataset"]))
        self.candidates: dict[str, ScoredList] | None = None
        self.generated: dict[str, list] | None = None
        self.contexts: dict[str, ContextSet] | None = None
        self.predictions: dict[str, QAResult] | None = None
        self.reports: list[EvalReport] = []
        self.meta: dict = {}
        chain = {
            "corpus": _file_hash(self._path(manifest["corpus"])),
            "dataset": _file_hash(self._path(manifest["dataset"]))
            if "dataset" in manifest
            else None,
            "backend": manifest.get("backend", {}),
            "seed": manifest.get("seed", 0),
        }
        self.chain_hash = _config_hash(chain)

    def _path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def need_examples(self) -> list[QAExample]:
        assert self.examples is not None  # guaranteed by validation
        return self.examples

    def checkpoint(self, position: int, name: str, stage: dict, ext: str) -> Path:
        self.chain_hash = _config_hash({"prev": self.chain_hash, "stage": stage})
        return self.out_dir / f"{position:02d}-{name}-{self.chain_hash[:10]}.{ext}"

    def base_meta(self) -> dict:
        meta = {
            "backend": self.client.name,
            "seed": self.manifest.get("seed", 0),
            "manifest_hash": _config_hash(self.manifest)[:12],
        }
        # Wall-clock provenance only for live backends: mock runs stay
        # byte-identical across repeats.
        if isinstance(self.client, HTTPClient):
            meta["timestamp"] = datetime.now(timezone.utc).isoformat()
        meta.update(self.meta)
        return meta


def run_manifest(
    manifest: dict,
    base_dir: str | Path = ".",
    force: bool = False,
    client: LLMClient | None = None,
) -> EvalReport:
    """Validate and run a pipeline manifest; returns the merged eval report.

    Each stage checkpoints to output_dir under a content-hash name and is
    reused on rerun unless force is set.
    """
    validate_manifest(manifest)
    base_dir = Path(base_dir)
    out_value = Path(manifest.get("output_dir", "out"))
    out_dir = out_value if out_value.is_absolute() else base_dir / out_value
    out_dir.mkdir(parents=True, exist_ok=True)
    if client is None:
        client = build_client(manifest.get("backend", {}))
    run = _Run(manifest, base_dir, out_dir, client, force)

    handlers = {
        "retrieve": _stage_retrieve,
        "generate": _stage_generate,
        "fuse": _stage_fuse,
        "rerank": _stage_rerank,
        "answer": _stage_answer,
        "eval-qa": _stage_eval_qa,
        "eval-ir": _stage_eval_ir,
        "eval-ppl": _stage_eval_ppl,
    }
    for position, stage in enumerate(manifest["stages"]):
        handlers[stage["stage"]](run, position, stage)

    merged = EvalReport(per_query={}, aggregate={}, run_meta=run.base_meta())
    for report in run.reports:
        merged = merged.merged_with(report)
    merged.run_meta = run.base_meta()
    write_report(merged, out_dir, name="report")
    return merged


def _fresh(run: _Run, path: Path) -> bool:
    return run.force or not path.exists()


def _stage_retrieve(run: _Run, position: int, stage: dict) -> None:
    # Dense retrieval reads vector files; their content belongs in the chain
    # so an edited store invalidates the checkpoint.
    hashed = dict(stage)
    if stage.get("retriever", "bm25") == "dense":
        for key in ("embeddings", "query_embeddings"):
            hashed[f"_{key}_sha"] = _file_hash(run._path(stage[key]))
    ckpt = run.checkpoint(position, "retrieve", hashed, "trec")
    examples = run.need_examples()
    k = int(stage.get("k", 10))
    if _fresh(run, ckpt):
        results: dict[str, ScoredList] = {}
        if stage.get("retriever", "bm25") == "dense":
            store = load_embeddings(run._path(stage["embeddings"]))
            store.attach_corpus(run.corpus)
            queries = load_embeddings(run._path(stage["query_embeddings"]))
            by_id = {qid: row for qid, row in zip(queries.ids, queries.matrix)}
            for ex in examples:
                if ex.id not in by_id:
                    raise EvalError(f"no query embedding for {ex.id!r}")
                results[ex.id] = dense_search(store, by_id[ex.id], k, query_id=ex.id)
        else:
            index = build_index(
                run.corpus,
                _tokenizer_from(stage),
                BM25Params(k1=float(stage.get("k1", 0.9)), b=float(stage.get("b", 0.4))),
            )
            for ex in examples:
                results[ex.id] = search(index, ex.question, k, query_id=ex.id)
        write_trec_run(results, ckpt)
        run.candidates = results
    else:
        run.candidates = run_to_scored_lists(read_trec_run(ckpt), run.corpus.by_id())


def _stage_generate(run: _Run, position: int, stage: dict) -> None:
    ckpt = run.checkpoint(position, "generate", stage, "jsonl")
    examples = run.need_examples()
    spec = _genspec_from(stage)
    if _fresh(run, ckpt):
        generated = {ex.id: generate_docs(run.client, ex.question, spec) for ex in examples}
        write_gen_cache(generated, ckpt, backend=run.client.name)
        run.generated = generated
    else:
        run.generated = load_gen_cache(ckpt)


def _stage_fuse(run: _Run, position: int, stage: dict) -> None:
    ckpt = run.checkpoint(position, "fuse", stage, "jsonl")
    examples = run.need_examples()
    mode = FusionMode(stage.get("mode", "RG"))
    k = int(stage.get("k", 5))
    balance = bool(stage.get("balance", False))
    run.meta["fusion"] = {"mode": mode.value, "k": k, "dedup": True, "balance": balance}
    if _fresh(run, ckpt):
        contexts: dict[str, ContextSet] = {}
        for ex in examples:
            retrieved = (run.candidates or {}).get(ex.id)
            generated = (run.generated or {}).get(ex.id, [])
            try:
                contexts[ex.id] = fuse(
                    retrieved, generated, mode, k, balance=balance, query_id=ex.id
                )
            except FusionError as exc:
                raise FusionError(f"query {ex.id!r}: {exc}") from exc
        write_contexts(contexts.values(), ckpt)
        run.contexts = contexts
    else:
        run.contexts = load_contexts(ckpt)


def _stage_rerank(run: _Run, position: int, stage: dict) -> None:
    ckpt = run.checkpoint(position, "rerank", stage, "trec")
    examples = run.need_examples() if run.examples is not None else []
    method = stage.get("method", "upr")
    questions = {ex.id: ex.question for ex in examples}

    def docs_for(qid: str) -> list:
        if run.contexts and qid in run.contexts:
            return list(run.contexts[qid].items)
        if run.candidates and qid in run.candidates:
            return run.candidates[qid].passages()
        raise ManifestError(f"rerank: no candidates for query {qid!r}")

    if _fresh(run, ckpt):
        results: dict[str, ScoredList] = {}
        for qid, question in questions.items():
            docs = docs_for(qid)
            if method == "upr":
                cfg = UPRConfig(
                    **{k: stage[k] for k in ("template", "question_prefix") if k in stage}
                )
                results[qid] = upr_rerank(run.client, question, docs, cfg, query_id=qid)
            else:
                cfg = RankGPTConfig(
                    window_size=int(stage.get("window_size", 20)),
                    stride=int(stage.get("stride", 10)),
                )
                results[qid] = rankgpt_rerank(
                    run.client, question, docs, cfg, query_id=qid, meta=run.meta
                )
        write_trec_run(results, ckpt)
    else:
        by_qid = read_trec_run(ckpt)
        results = {}
        for qid, rows in by_qid.items():
            pool = {p.id: p for p in docs_for(qid)}
            items = [(pool[doc_id], score) for doc_id, score in rows]
            results[qid] = ScoredList(query_id=qid, items=items)
    run.candidates = results
    if run.contexts:
        rebuilt = {}
        for qid, ctx in run.contexts.items():
            if qid in results:
                reordered = results[qid].passages()[: ctx.k]
                rebuilt[qid] = ContextSet(
                    query_id=qid, mode=ctx.mode, items=reordered, k=ctx.k
                )
            else:
                rebuilt[qid] = ctx
        run.contexts = rebuilt


def _stage_answer(run: _Run, position: int, stage: dict) -> None:
    ckpt = run.checkpoint(position, "answer", stage, "jsonl")
    examples = run.need_examples()
    template = _qa_template_from(stage)
    run.meta["qa_template_hash"] = _config_hash(asdict(template))[:10]
    k = int(stage.get("k", 5))
    if _fresh(run, ckpt):
        predictions: dict[str, QAResult] = {}
        for ex in examples:
            if run.contexts and ex.id in run.contexts:
                ctx = run.contexts[ex.id]
            else:
                retrieved = (run.candidates or {}).get(ex.id)
                try:
                    ctx = fuse(retrieved, [], FusionMode.R, k, query_id=ex.id)
                except FusionError as exc:
                    raise FusionError(f"query {ex.id!r}: {exc}") from exc
            predictions[ex.id] = answer_question(
                run.client,
                ex.question,
                ctx,
                template,
                max_tokens=int(stage.get("max_tokens", 64)),
            )
        write_predictions(predictions.values(), ckpt)
        run.predictions = predictions
    else:
        run.predictions = load_predictions(ckpt)


def _load_report(path: Path) -> EvalReport:
    payload = json.loads(path.read_text(encoding="utf-8"))
    return EvalReport(
        per_query=payload.get("per_query", {}),
        aggregate=payload.get("aggregate", {}),
        run_meta=payload.get("run_meta", {}),
    )


def _stage_eval_qa(run: _Run, position: int, stage: dict) -> None:
    ckpt = run.checkpoint(position, "eval-qa", stage, "json")
    if not _fresh(run, ckpt):
        run.reports.append(_load_report(ckpt))
        return
    examples = run.need_examples()
    metrics = stage.get("metrics", ["em", "recall", "con"])
    per_query: dict[str, dict[str, float]] = {ex.id: {} for ex in examples}

    if any(m in ("em", "recall", "con") for m in metrics):
        if run.predictions is None:
            raise ManifestError("eval-qa: no predictions; run the answer stage first")
        for ex in examples:
            if ex.id not in run.predictions:
                raise EvalError(f"no prediction for query {ex.id!r}")
            pred = run.predictions[ex.id].prediction
            if "em" in metrics:
                per_query[ex.id]["exact_match"] = float(exact_match(pred, ex.answers))
            if "recall" in metrics:
                per_query[ex.id]["recall"] = answer_recall(pred, ex.answers)
            if "con" in metrics:
                per_query[ex.id]["containment"] = float(containment(pred, ex.answers))

    if "topk" in metrics:
        if run.candidates is None:
            raise ManifestError("eval-qa: no retrieval results; run retrieve first")
        ks = [int(k) for k in stage.get("ks", [1, 5])]
        hits = topk_hits(run.candidates, examples, ks)
        for ex in examples:
            for k in ks:
                per_query[ex.id][f"top{k}_accuracy"] = float(hits[ex.id][k])

    report = EvalReport.from_per_query(per_query, run_meta=run.base_meta())
    write_report(report, run.out_dir, name=ckpt.stem)
    run.reports.append(report)


def _stage_eval_ir(run: _Run, position: int, stage: dict) -> None:
    hashed = {**stage, "_qrels_sha": _file_hash(run._path(stage["qrels"]))}
    ckpt = run.checkpoint(position, "eval-ir", hashed, "json")
    if not _fresh(run, ckpt):
        run.reports.append(_load_report(ckpt))
        return
    if run.candidates is None:
        raise ManifestError("eval-ir: no ranked results; run retrieve first")
    qrels = load_qrels(run._path(stage["qrels"]))
    k = int(stage.get("k", 10))
    per_ndcg = ndcg_per_query(run.candidates, qrels, k)
    per_query = {qid: {f"ndcg@{k}": value} for qid, value in per_ndcg.items()}
    report = EvalReport.from_per_query(per_query, run_meta=run.base_meta())
    write_report(report, run.out_dir, name=ckpt.stem)
    run.reports.append(report)


def _stage_eval_ppl(run: _Run, position: int, stage: dict) -> None:
    text_path = run._path(stage["text"])
    hashed = {**stage, "_text_sha": _file_hash(text_path)}
    ckpt = run.checkpoint(position, "eval-ppl", hashed, "json")
    if not _fresh(run, ckpt):
        run.reports.append(_load_report(ckpt))
        return
    text = text_path.read_text(encoding="utf-8")
    strategies = stage.get("strategies", ["none"])
    index: InvertedIndex | None = None
    if any(mode in ("R", "RG", "GR") for mode in strategies):
        index = build_index(run.corpus, _tokenizer_from(stage))
    metrics: dict[str, float] = {}
    for mode in strategies:
        strategy = PPLStrategy(
            mode=mode,
            retrieval_stride=int(stage.get("retrieval_stride", 32)),
            query_len=int(stage.get("query_len", 32)),
            k_ctx=int(stage.get("k_ctx", 1)),
        )
        gen = None
        if mode in ("G", "RG", "GR"):
            spec = GenSpec(
                n_docs=strategy.k_ctx,
                max_tokens=int(stage.get("gen_max_tokens", 64)),
                temperature=0.0,
            )
            gen = lambda query, _spec=spec: generate_docs(run.client, query, _spec)
        metrics[f"perplexity_{mode}"] = perplexity(
            run.client, text, strategy, index=index, gen=gen
        )
    per_query = {text_path.stem: metrics}
    report = EvalReport.from_per_query(per_query, run_meta=run.base_meta())
    write_report(report, run.out_dir, name=ckpt.stem)
    run.reports.append(report)


# --- subcommands -------------------------------------------------------------


def _add_backend_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--backend",
        default="mock-echo",
        choices=("mock-echo", "mock-uniform", "http"),
        help="LLM backend (http uses RAGMIX_API_BASE/RAGMIX_API_KEY/RAGMIX_MODEL)",
    )
    parser.add_argument("--vocab-size", type=int, default=16)
    parser.add_argument("--model", default=None)
    parser.add_argument("--base-url", default=None)


def _client_from_args(args: argparse.Namespace) -> LLMClient:
    return build_client(
        {
            "backend": args.backend,
            "vocab_size": args.vocab_size,
            "model": args.model,
            "base_url": args.base_url,
        }
    )


def _materialize(path_str: str, suffix: str) -> Path:
    """Resolve '-' to a temp file fed from stdin so loaders see a real path."""
    if path_str != "-":
        return Path(path_str)
    handle = tempfile.NamedTemporaryFile(
        mode="w", suffix=suffix, delete=False, encoding="utf-8"
    )
    handle.write(sys.stdin.read())
    handle.close()
    return Path(handle.name)


def _emit_trec(results: dict[str, ScoredList], out: str, tag: str) -> None:
    if out == "-":
        for qid in results:
            for rank, (passage, score) in enumerate(results[qid].items, start=1):
                print(f"{qid} Q0 {passage.id} {rank} {score:.6f} {tag}")
    else:
        write_trec_run(results, out, tag=tag)


def _cmd_index(args: argparse.Namespace) -> int:
    corpus = load_corpus(_materialize(args.corpus, ".tsv"), args.format)
    cfg = TokenizerConfig(
        lowercase=not args.no_lowercase,
        strip_accents=not args.no_strip_accents,
        min_token_len=args.min_token_len,
        stem=args.stem,
    )
    index = build_index(corpus, cfg, BM25Params(k1=args.k1, b=args.b))
    save_index(index, args.out)
    print(f"indexed {index.doc_count} documents -> {args.out}")
    return 0


def _cmd_retrieve(args: argparse.Namespace) -> int:
    examples = load_qa_examples(_materialize(args.queries, ".jsonl"))
    index = load_index(args.index)
    results = {
        ex.id: search(index, ex.question, args.k, query_id=ex.id) for ex in examples
    }
    _emit_trec(results, args.out, args.tag)
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    examples = load_qa_examples(_materialize(args.queries, ".jsonl"))
    client = _client_from_args(args)
    spec = GenSpec(
        n_docs=args.n_docs,
        max_tokens=args.max_tokens,
        temperature=args.temperature,
    )
    entries = [(ex.id, generate_docs(client, ex.question, spec)) for ex in examples]
    write_gen_cache(entries, args.out, backend=client.name)
    print(f"generated {sum(len(d) for _, d in entries)} documents -> {args.out}")
    return 0


def _cmd_fuse(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    run = read_trec_run(_materialize(args.retrieved, ".trec"))
    retrieved = run_to_scored_lists(run, corpus.by_id())
    generated = load_gen_cache(args.generated) if args.generated else {}
    mode = FusionMode(args.mode)
    contexts = []
    for qid in sorted(set(retrieved) | set(generated)):
        contexts.append(
            fuse(
                retrieved.get(qid),
                generated.get(qid, []),
                mode,
                args.k,
                balance=args.balance,
                query_id=qid,
            )
        )
    write_contexts(contexts, args.out)
    print(f"fused {len(contexts)} context sets -> {args.out}")
    return 0


def _cmd_rerank(args: argparse.Namespace) -> int:
    examples = load_qa_examples(_materialize(args.queries, ".jsonl"))
    questions = {ex.id: ex.question for ex in examples}
    client = _client_from_args(args)
    if args.contexts:
        pools = {qid: ctx.items for qid, ctx in load_contexts(args.contexts).items()}
    else:
        if not args.run or not args.corpus:
            print("error: rerank needs --contexts or both --run and --corpus", file=sys.stderr)
            return 1
        corpus = load_corpus(args.corpus)
        lists = run_to_scored_lists(read_trec_run(args.run), corpus.by_id())
        pools = {qid: sl.passages() for qid, sl in lists.items()}
    results: dict[str, ScoredList] = {}
    meta: dict = {}
    for qid, docs in pools.items():
        if qid not in questions:
            raise EvalError(f"no question for query {qid!r}")
        if args.method == "upr":
            results[qid] = upr_rerank(client, questions[qid], docs, query_id=qid)
        else:
            cfg = RankGPTConfig(window_size=args.window_size, stride=args.stride)
            results[qid] = rankgpt_rerank(
                client, questions[qid], docs, cfg, query_id=qid, meta=meta
            )
    _emit_trec(results, args.out, f"ragmix-{args.method}")
    if meta.get("rankgpt_failures"):
        print(f"warning: {len(meta['rankgpt_failures'])} window(s) failed", file=sys.stderr)
    return 0


def _cmd_answer(args: argparse.Namespace) -> int:
    examples = load_qa_examples(_materialize(args.queries, ".jsonl"))
    contexts = load_contexts(args.contexts)
    client = _client_from_args(args)
    results = []
    for ex in examples:
        if ex.id not in contexts:
            raise EvalError(f"no context set for query {ex.id!r}")
        results.append(answer_question(client, ex.question, contexts[ex.id]))
    write_predictions(results, args.out)
    print(f"answered {len(results)} questions -> {args.out}")
    return 0


def _cmd_eval_qa(args: argparse.Namespace) -> int:
    examples = load_qa_examples(_materialize(args.queries, ".jsonl"))
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in _QA_METRICS]
    if unknown:
        print(f"error: unknown metrics {unknown}", file=sys.stderr)
        return 1
    per_query: dict[str, dict[str, float]] = {ex.id: {} for ex in examples}
    if any(m in ("em", "recall", "con") for m in metrics):
        if not args.predictions:
            print("error: --predictions required for em/recall/con", file=sys.stderr)
            return 1
        predictions = load_predictions(args.predictions)
        for ex in examples:
            if ex.id not in predictions:
                raise EvalError(f"no prediction for query {ex.id!r}")
            pred = predictions[ex.id].prediction
            if "em" in metrics:
                per_query[ex.id]["exact_match"] = float(exact_match(pred, ex.answers))
            if "recall" in metrics:
                per_query[ex.id]["recall"] = answer_recall(pred, ex.answers)
            if "con" in metrics:
                per_query[ex.id]["containment"] = float(containment(pred, ex.answers))
    if "topk" in metrics:
        if not args.run or not args.corpus:
            print("error: --run and --corpus required for topk", file=sys.stderr)
            return 1
        corpus = load_corpus(args.corpus)
        results = run_to_scored_lists(read_trec_run(args.run), corpus.by_id())
        ks = [int(k) for k in args.ks.split(",")]
        hits = topk_hits(results, examples, ks)
        for ex in examples:
            for k in ks:
                per_query[ex.id][f"top{k}_accuracy"] = float(hits[ex.id][k])
    report = EvalReport.from_per_query(per_query, run_meta={"source": "eval-qa"})
    write_report(report, args.out_dir, name=args.name)
    for metric in sorted(report.aggregate):
        print(f"{metric}\t{report.aggregate[metric]:.6f}")
    return 0


def _cmd_eval_ir(args: argparse.Namespace) -> int:
    run = read_trec_run(_materialize(args.run, ".trec"))
    results = run_to_scored_lists(run)
    qrels = load_qrels(args.qrels)
    per_ndcg = ndcg_per_query(results, qrels, args.k)
    aggregate = sum(per_ndcg.values()) / len(per_ndcg)
    if args.out_dir:
        per_query = {qid: {f"ndcg@{args.k}": v} for qid, v in per_ndcg.items()}
        report = EvalReport.from_per_query(per_query, run_meta={"source": "eval-ir"})
        write_report(report, args.out_dir, name=args.name)
    print(f"ndcg@{args.k}\t{aggregate:.6f}")
    return 0


def _cmd_eval_ppl(args: argparse.Namespace) -> int:
    text = _materialize(args.text, ".txt").read_text(encoding="utf-8")
    client = _client_from_args(args)
    strategy = PPLStrategy(
        mode=args.strategy,
        retrieval_stride=args.retrieval_stride,
        query_len=args.query_len,
        k_ctx=args.k_ctx,
    )
    index = None
    if strategy.mode in ("R", "RG", "GR"):
        if not args.corpus:
            print("error: --corpus required for retrieval strategies", file=sys.stderr)
            return 1
        index = build_index(load_corpus(args.corpus))
    gen = None
    if strategy.mode in ("G", "RG", "GR"):
        spec = GenSpec(n_docs=strategy.k_ctx, max_tokens=args.gen_max_tokens, temperature=0.0)
        gen = lambda query: generate_docs(client, query, spec)
    value = perplexity(client, text, strategy, index=index, gen=gen)
    print(f"perplexity_{strategy.mode}\t{value:.6f}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    manifest_path = _materialize(args.manifest, ".json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        print(f"error: bad manifest JSON: {exc}", file=sys.stderr)
        return 1
    base_dir = manifest_path.parent if args.manifest != "-" else Path.cwd()
    report = run_manifest(manifest, base_dir=base_dir, force=args.force)
    for metric in sorted(report.aggregate):
        print(f"{metric}\t{report.aggregate[metric]:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragmix",
        description="Retrieval-augmented generation experimentation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a BM25 index from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", default=None, choices=(None, "tsv", "jsonl"))
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.add_argument("--no-lowercase", action="store_true")
    p.add_argument("--no-strip-accents", action="store_true")
    p.add_argument("--min-token-len", type=int, default=1)
    p.add_argument("--stem", action="store_true")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("retrieve", help="run BM25 queries against a saved index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default="-")
    p.add_argument("--tag", default="ragmix")
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("generate", help="generate background documents per question")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=5)
    p.add_argument("--max-tokens", type=int, default=128)
    p.add_argument("--temperature", type=float, default=None)
    _add_backend_args(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("fuse", help="merge retrieved and generated passages")
    p.add_argument("--retrieved", required=True, help="TREC run file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--generated", default=None, help="generation cache JSONL")
    p.add_argument("--mode", default="RG", choices=[m.value for m in FusionMode])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("rerank", help="rerank candidates with upr or rankgpt")
    p.add_argument("--method", default="upr", choices=("upr", "rankgpt"))
    p.add_argument("--queries", required=True)
    p.add_argument("--contexts", default=None, help="context JSONL to rerank")
    p.add_argument("--run", default=None, help="TREC run file to rerank")
    p.add_argument("--corpus", default=None)
    p.add_argument("--window-size", type=int, default=20)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--out", default="-")
    _add_backend_args(p)
    p.set_defaults(func=_cmd_rerank)

    p = sub.add_parser("answer", help="answer questions from fused contexts")
    p.add_argument("--queries", required=True)
    p.add_argument("--contexts", required=True)
    p.add_argument("--out", required=True)
    _add_backend_args(p)
    p.set_defaults(func=_cmd_answer)

    p = sub.add_parser("eval-qa", help="score predictions and retrieval accuracy")
    p.add_argument("--queries", required=True)
    p.add_argument("--predictions", default=None)
    p.add_argument("--run", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--metrics", default="em,recall,con")
    p.add_argument("--ks", default="1,5")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="report")
    p.set_defaults(func=_cmd_eval_qa)

    p = sub.add_parser("eval-ir", help="nDCG against TREC qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--name", default="report")
    p.set_defaults(func=_cmd_eval_ir)

    p = sub.add_parser("eval-ppl", help="retrieval-augmented perplexity of a text")
    p.add_argument("--text", required=True)
    p.add_argument("--strategy", default="none", choices=("none", "R", "G", "RG", "GR"))
    p.add_argument("--retrieval-stride", type=int, default=32)
    p.add_argument("--query-len", type=int, default=32)
    p.add_argument("--k-ctx", type=int, default=1)
    p.add_argument("--gen-max-tokens", type=int, default=64)
    p.add_argument("--corpus", default=None)
    _add_backend_args(p)
    p.set_defaults(func=_cmd_eval_ppl)

    p = sub.add_parser("run", help="run a pipeline manifest with checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--force", action="store_true", help="recompute all checkpoints")
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        CorpusError,
        RetrieverError,
        FusionError,
        GeneratorError,
        EvalError,
        ManifestError,
        LLMClientError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
