"""Figure rendering for reports: loss curves, recall bars, benchmark
comparisons, and TSM heatmaps, saved as PNG next to the JSONL output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from evret.bench import BenchReport
from evret.metrics import EvalReport


def save_loss_curves(log: list[dict], out_png) -> Path:
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    steps = [rec["step"] for rec in log]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [rec["L"] for rec in log], label="total", lw=1.2)
    for key, style in (("L_F", "--"), ("L_E", ":")):
        if log and key in log[0]:
            ax.plot(steps, [rec[key] for rec in log], style, label=key, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_recall_bars(report: EvalReport, out_png) -> Path:
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    rows = report.rows()
    labels = [
        f"{r['task']} R@{r['K']}" + ("" if r["iou"] is None else f"@{r['iou']}") for r in rows
    ]
    values = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * len(rows)), 3.5))
    ax.bar(np.arange(len(rows)), values, color="#4878cf")
    ax.set_xticks(np.arange(len(rows)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_bench_bars(reports: dict[str, BenchReport], out_png) -> Path:
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    modes = list(reports)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    panels = (
        ("latency (ms)", [reports[m].retrieval_latency_ms for m in modes]),
        ("stored vectors", [reports[m].vector_count for m in modes]),
        ("memory (bytes)", [reports[m].memory_bytes for m in modes]),
    )
    for ax, (title, values) in zip(axes, panels):
        ax.bar(modes, values, color=["#4878cf", "#d65f5f"])
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_tsm_heatmap(tsm: np.ndarray, scores: np.ndarray | None, out_png) -> Path:
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    if scores is not None:
        fig, (ax, ax2) = plt.subplots(
            2, 1, figsize=(4.5, 5.5), gridspec_kw={"height_ratios": [4, 1]}
        )
        ax2.plot(scores, lw=1.0)
        ax2.set_xlabel("frame")
        ax2.set_ylabel("boundary score")
    else:
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
    im = ax.imshow(tsm, cmap="viridis", vmin=-1, vmax=1)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
