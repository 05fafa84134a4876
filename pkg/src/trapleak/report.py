"""Figures rendered next to the CSV outputs (PNG, non-interactive backend)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import read_metrics  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}

METRIC_COLORS = {"A": "#7f7f7f", "P": "#1f77b4", "R": "#d62728"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_metric_curve(summary, x: str, path, metrics=("A", "P", "R"), title=None, logx=False):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = [r[x] for r in summary]
        for m in metrics:
            ax.plot(xs, [r[m] for r in summary], marker="o", ms=3, label=m,
                    color=METRIC_COLORS.get(m))
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(x)
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_grouped(summary, x: str, group: str, path, metric="R", title=None):
    """One line of ``metric`` against ``x`` per value of ``group``."""
    series = defaultdict(list)
    for r in summary:
        series[r[group]].append((r[x], r[metric]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key in sorted(series):
            pts = sorted(series[key])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3,
                    label=f"{group}={key}")
        ax.set_xlabel(x)
        ax.set_ylabel(metric)
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_bars(labels, values, path, ylabel="R", title=None, log=False):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(values)), values, color="#4c72b0")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=35, ha="right")
        ax.set_ylabel(ylabel)
        if log:
            ax.set_yscale("log")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_loss_traces(traces, path, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, losses in traces:
            ax.plot(losses, lw=0.8, label=str(name))
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("matching loss")
        if len(traces) <= 8:
            ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def render(command: str, out_dir) -> list[Path]:
    """Draw the figure(s) for ``command`` from the summary CSV in ``out_dir``."""
    out = Path(out_dir)
    summary_path = out / f"{command}_summary.csv"
    if not summary_path.exists():
        return []
    rows = read_metrics(summary_path)
    if not rows:
        return []
    fig = out / f"{command}.png"
    if command in ("sweep-s",):
        return [plot_metric_curve(rows, "s", fig, title="trap weights: scaling factor")]
    if command == "sweep-bn":
        return [plot_grouped(rows, "B", "N", fig, title="recall by batch size")]
    if command == "averaging":
        return [plot_metric_curve(rows, "k", fig, title="averaged mini-batches")]
    if command in ("passive", "active", "text"):
        labels = [str(r.get("condition") or r.get("init")) for r in rows]
        return [plot_bars(labels, [r["R"] for r in rows], fig, title=command)]
    if command == "defend":
        labels = [str(r["condition"]) for r in rows]
        paths = [plot_bars(labels, [r["R"] for r in rows], fig, title="defenses: recall")]
        errs = [r["match_error_mean"] if r["match_error_mean"] not in ("", None) else 0.0
                for r in rows]
        paths.append(plot_bars(labels, [max(e, 1e-18) for e in errs],
                               out / "defend_error.png", ylabel="mean match error", log=True))
        return paths
    if command == "dlg":
        labels = ["analytic", "optimization"]
        vals = [max(rows[0]["analytic_error"], 1e-18), max(rows[0]["dlg_error"], 1e-18)]
        return [plot_bars(labels, vals, fig, ylabel="mean relative error", log=True)]
    return []
