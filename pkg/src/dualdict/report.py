"""File emission: delimited tables, structured reports, and figures.

Every report writes a machine-readable file (TSV, and JSON for the
metric summaries) plus a rendered PNG next to it. Figures always go
through the Agg backend so headless runs behave the same as local ones.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import GenerationReport, RetrievalReport
from .training import AblationResult, TrainHistory

__all__ = [
    "save_tsv",
    "save_history",
    "save_ablation",
    "save_retrieval_report",
    "save_generation_report",
]


def save_tsv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(str(h) for h in header) + "\n")
        for row in rows:
            f.write("\t".join(repr(float(x)) if isinstance(x, float) else str(x) for x in row) + "\n")


def _fig_path(base: str) -> str:
    return os.path.splitext(base)[0] + ".png"


def save_history(history: TrainHistory, tsv_path) -> list[str]:
    """History table plus one loss-vs-epoch panel; returns written paths."""
    tsv_path = str(tsv_path)
    history.save_tsv(tsv_path)
    header, rows = history.to_table()
    png_path = _fig_path(tsv_path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if rows:
        epochs = [r[0] for r in rows]
        for ci, col in enumerate(header[1:], start=1):
            style = "-" if col.startswith("dev_") else "--"
            ax.plot(epochs, [r[ci] for r in rows], style, label=col, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [tsv_path, png_path]


def save_ablation(result: AblationResult, tsv_path) -> list[str]:
    """Long-format ablation table plus dev-total curves per preset."""
    tsv_path = str(tsv_path)
    header, rows = result.table
    save_tsv(tsv_path, header, rows)
    png_path = _fig_path(tsv_path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for preset, history in result.histories.items():
        epochs = [r.epoch for r in history.records]
        totals = [r.dev_losses["total"] for r in history.records]
        ax.plot(epochs, totals, marker="o", markersize=2.5, label=preset, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev total loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [tsv_path, png_path]


def save_retrieval_report(report: RetrievalReport, ranks: list[int], base_path) -> list[str]:
    """Median/accuracy/std summary as TSV + JSON + text + rank histogram."""
    base = os.path.splitext(str(base_path))[0]
    tsv = base + ".tsv"
    header = ["median_rank", "acc1", "acc10", "acc100", "rank_std_forced", "rank_std_real", "n"]
    row = [
        report.median_rank,
        report.acc1,
        report.acc10,
        report.acc100,
        report.rank_std_forced,
        report.rank_std_real,
        report.n,
    ]
    save_tsv(tsv, header, [row])

    js = base + ".json"
    with open(js, "w", encoding="utf-8") as f:
        json.dump(dict(zip(header, row)), f, indent=2, sort_keys=True)
        f.write("\n")

    txt = base + ".txt"
    with open(txt, "w", encoding="utf-8") as f:
        f.write(
            "median rank {:.1f} | acc@1 {:.3f} acc@10 {:.3f} acc@100 {:.3f} | "
            "rank std {:.1f} (forced) {:.1f} (real) | n {}\n".format(
                report.median_rank,
                report.acc1,
                report.acc10,
                report.acc100,
                report.rank_std_forced,
                report.rank_std_real,
                report.n,
            )
        )

    png = base + ".png"
    fig, ax = plt.subplots(figsize=(6, 4))
    arr = np.asarray(ranks)
    edges = np.logspace(0, np.log10(max(arr.max(), 10) + 1), 30)
    ax.hist(arr, bins=edges, color="#4878b0", edgecolor="white")
    ax.set_xscale("log")
    ax.set_xlabel("gold rank")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [tsv, js, txt, png]


def save_generation_report(report: GenerationReport, base_path) -> list[str]:
    """BLEU / ROUGE-L summary as TSV + JSON + text + bar figure."""
    base = os.path.splitext(str(base_path))[0]
    tsv = base + ".tsv"
    header = ["bleu", "rouge_l", "n"]
    row = [report.bleu, report.rouge_l, report.n]
    save_tsv(tsv, header, [row])

    js = base + ".json"
    with open(js, "w", encoding="utf-8") as f:
        json.dump(dict(zip(header, row)), f, indent=2, sort_keys=True)
        f.write("\n")

    txt = base + ".txt"
    with open(txt, "w", encoding="utf-8") as f:
        f.write(
            "BLEU {:.4f} | ROUGE-L {:.4f} | n {}\n".format(report.bleu, report.rouge_l, report.n)
        )

    png = base + ".png"
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar(["BLEU", "ROUGE-L"], [report.bleu, report.rouge_l], color=["#4878b0", "#ee854a"])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return [tsv, js, txt, png]
