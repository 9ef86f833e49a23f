"""Report rendering: JSON, a flat aggregate TSV, and figures next to them."""

from __future__ import annotations

import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from ragmix.evaluation import EvalReport

# Keep PNG output free of build-environment noise so reruns are byte-identical.
_PNG_METADATA = {"Software": None}

_TOPK_RE = re.compile(r"^top(\d+)_accuracy$")
_PPL_RE = re.compile(r"^perplexity_(\w+)$")


def write_report(
    report: EvalReport, out_dir: str | Path, name: str = "report", figures: bool = True
) -> list[Path]:
    """Write <name>.json, <name>.tsv, and figures for the metric families found."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    json_path = out_dir / f"{name}.json"
    payload = {
        "aggregate": report.aggregate,
        "per_query": report.per_query,
        "run_meta": report.run_meta,
    }
    json_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    written.append(json_path)

    tsv_path = out_dir / f"{name}.tsv"
    rows = ["metric\tvalue"]
    for metric in sorted(report.aggregate):
        rows.append(f"{metric}\t{report.aggregate[metric]:.6f}")
    tsv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    written.append(tsv_path)

    if figures and report.aggregate:
        written.extend(_render_figures(report, out_dir, name))
    return written


def _render_figures(report: EvalReport, out_dir: Path, name: str) -> list[Path]:
    written: list[Path] = []
    topk: dict[int, float] = {}
    ppl: dict[str, float] = {}
    plain: dict[str, float] = {}
    for metric, value in report.aggregate.items():
        if m := _TOPK_RE.match(metric):
            topk[int(m.group(1))] = value
        elif m := _PPL_RE.match(metric):
            ppl[m.group(1)] = value
        else:
            plain[metric] = value

    if topk:
        ks = sorted(topk)
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(ks, [topk[k] for k in ks], marker="o")
        ax.set_xlabel("k")
        ax.set_ylabel("top-k accuracy")
        ax.set_ylim(0.0, 1.05)
        ax.set_xticks(ks)
        ax.grid(True, alpha=0.3)
        written.append(_save(fig, out_dir / f"{name}_topk.png"))

    if ppl:
        labels = sorted(ppl)
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.bar(range(len(labels)), [ppl[label] for label in labels])
        ax.set_xticks(range(len(labels)), labels)
        ax.set_ylabel("perplexity")
        written.append(_save(fig, out_dir / f"{name}_perplexity.png"))

    if plain:
        labels = sorted(plain)
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 3.2))
        ax.bar(range(len(labels)), [plain[label] for label in labels])
        ax.set_xticks(range(len(labels)), labels, rotation=20, ha="right")
        ax.set_ylabel("value")
        written.append(_save(fig, out_dir / f"{name}_metrics.png"))
    return written


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path
