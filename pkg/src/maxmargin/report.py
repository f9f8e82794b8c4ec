"""Report emission: delimited tables, JSON documents, and the matching
matplotlib figures rendered to files next to them.

All numeric formatting rounds to two decimals only here; the computations
upstream stay at full precision. Writers are deterministic so reruns with
the same config and seed produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def write_eval_csv(path, reports: Sequence[EvalReport]) -> None:
    """One row per model, in the style of the robust-accuracy tables:
    clean accuracy, the averages, then per-eps combined robust accuracy,
    followed by the whitebox-only columns and the transfer gaps."""
    path = Path(path)
    eps_grid = reports[0].eps_grid if reports else []
    header = ["model", "clean_acc", "avg_acc", "avg_rob_acc"]
    header += [f"rob_{e:g}" for e in eps_grid]
    header += [f"wb_rob_{e:g}" for e in eps_grid]
    header += [f"transfer_gap_{e:g}" for e in eps_grid]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in reports:
            row = [r.name, _fmt(r.clean_acc), _fmt(r.avg_acc), _fmt(r.avg_rob_acc)]
            row += [_fmt(v) for v in r.combined]
            row += [_fmt(v) for v in r.whitebox]
            row += [_fmt(v) for v in r.transfer_gap]
            w.writerow(row)


def write_eval_json(path, reports: Sequence[EvalReport]) -> None:
    doc = [
        {
            "model": r.name,
            "clean_acc": r.clean_acc,
            "eps_grid": r.eps_grid,
            "combined": r.combined,
            "whitebox": r.whitebox,
            "transfer_gap": r.transfer_gap,
            "avg_acc": r.avg_acc,
            "avg_rob_acc": r.avg_rob_acc,
            "whitebox_avg_acc": r.whitebox_avg_acc,
            "whitebox_avg_rob_acc": r.whitebox_avg_rob_acc,
        }
        for r in reports
    ]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def plot_eval(path, reports: Sequence[EvalReport]) -> None:
    """Robust accuracy vs attack magnitude, one curve per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in reports:
        ax.plot([0.0, *r.eps_grid], [r.clean_acc, *r.combined], marker="o", label=r.name)
    ax.set_xlabel("attack magnitude")
    ax.set_ylabel("robust accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_margin_trace_csv(path, history: Sequence[np.ndarray],
                           successful: Sequence[np.ndarray] | None = None) -> None:
    """Per-epoch per-example margin trace: epoch, example id, margin,
    successful flag (1 when a flip was found within the search cap)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "example", "margin", "successful"])
        for epoch, vals in enumerate(history):
            succ = successful[epoch] if successful is not None else np.ones(len(vals), bool)
            for i, v in enumerate(vals):
                w.writerow([epoch, i, f"{float(v):.6f}", int(succ[i])])


def plot_margin_hist(path, history: Sequence[np.ndarray], d_max: float | None = None,
                     max_panels: int = 8) -> None:
    """Histogram grid of the margin distribution across training epochs."""
    if not history:
        return
    idx = np.unique(np.linspace(0, len(history) - 1, min(max_panels, len(history))).astype(int))
    fig, axes = plt.subplots(1, len(idx), figsize=(2.2 * len(idx), 3.0), sharey=True)
    axes = np.atleast_1d(axes)
    top = max(float(np.max(h)) for h in history)
    for ax, e in zip(axes, idx):
        ax.hist(history[e], bins=30, range=(0.0, top), orientation="horizontal",
                color="tab:blue")
        if d_max is not None:
            ax.axhline(d_max, color="tab:red", lw=0.8, ls="--")
        ax.set_xlabel(f"epoch {e}")
    axes[0].set_ylabel("margin")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_csv(path, metrics: Sequence[dict]) -> None:
    """Per-epoch training metrics; columns are the union of row keys."""
    if not metrics:
        Path(path).write_text("")
        return
    cols = ["epoch"] + sorted({k for row in metrics for k in row} - {"epoch"})
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in metrics:
            w.writerow([_format_cell(row.get(c)) for c in cols])


def _format_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def write_epsilon_store_csv(path, values: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example", "eps"])
        for i, v in enumerate(values):
            w.writerow([i, f"{float(v):.6f}"])


def write_transcript_csv(path, rows: Sequence[dict]) -> None:
    """Attack transcript: per (model, example, eps, restart) outcome."""
    cols = ["model", "example", "eps", "loss", "restart", "success", "final_loss"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([
                row["model"], row["example"], f"{row['eps']:g}", row["loss"],
                row["restart"], int(row["success"]), f"{row['final_loss']:.6f}",
            ])
