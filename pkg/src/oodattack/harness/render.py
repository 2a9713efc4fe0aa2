"""Score histograms, sweep curves and adversarial-example grids.

Figures go through the Agg canvas directly (no global backend switch) under a
fixed rc style, and PNG metadata is stripped, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import logging
import re
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

log = logging.getLogger(__name__)

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.grid": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "path.simplify": False,
    "svg.hashsalt": "oodattack",
}

COLORS = {"cleanID": "#2b6cb0", "advID": "#c53030", "distal": "#c53030", "noiseID": "#718096",
          "naturalOOD": "#d69e2e"}
LABELS = {"cleanID": "clean ID", "advID": "adversarial ID", "distal": "distal", "noiseID": "noise ID",
          "naturalOOD": "natural OOD"}


def safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_") or "model"


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def histogram_figure(distributions: dict, tau: float | None, title: str, bins: int = 40) -> Figure:
    """One panel overlaying every provenance in ``distributions`` with a dashed line at ``tau``."""
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(5, 3.2))
        ax = fig.add_subplot(1, 1, 1)
        allv = np.concatenate([np.asarray(v) for v in distributions.values()])
        lo, hi = float(allv.min()), float(allv.max())
        if hi <= lo:
            hi = lo + 1e-6
        edges = np.linspace(lo, hi, bins + 1)
        for prov in ("cleanID", "naturalOOD", "noiseID", "advID", "distal"):
            if prov in distributions:
                ax.hist(distributions[prov], bins=edges, alpha=0.55, color=COLORS[prov], label=LABELS[prov])
        if tau is not None:
            ax.axvline(tau, color="black", linestyle="--", linewidth=1.2, label="95% TPR threshold")
        ax.set_xlabel("OOD score")
        ax.set_ylabel("count")
        ax.set_title(title)
        ax.legend(loc="upper left", fontsize=7, frameon=False)
        fig.tight_layout()
    return fig


def render_histograms(report, directory) -> list[Path]:
    """One PNG per (model, head) under ``<dir>/plots/``; returns the written paths."""
    out_dir = Path(directory) / "plots"
    det = report.config.get("detector", {}).get("kind", "")
    written = []
    for (model, head), dists in report.score_distributions().items():
        dists = {p: v for p, v in dists.items() if len(v)}
        if not dists:
            log.warning("no scores for %s/%s; panel skipped", model, head)
            continue
        tau = report.thresholds.get((model, head, det))
        fig = histogram_figure(dists, tau, f"{model} / {head} / {det}")
        written.append(_save(fig, out_dir / f"hist_{safe_name(model)}_{safe_name(head)}.png"))
    return written


def render_sweep(sweep, directory, metrics=("acc", "fnr95")) -> list[Path]:
    """Metric-vs-epsilon curves per target model, noise baseline dashed when present."""
    out_dir = Path(directory) / "plots"
    written = []
    xs = np.arange(len(sweep.epsilons))
    for metric in metrics:
        with matplotlib.rc_context(STYLE):
            fig = Figure(figsize=(5, 3.2))
            ax = fig.add_subplot(1, 1, 1)
            for model, series in sweep.series.items():
                if metric in series:
                    ax.plot(xs, series[metric], marker="o", label=model)
            if sweep.noise is not None:
                rows = [r for r in sweep.noise.metrics if r.metric == metric and r.role == "noise_avg"]
                if rows:
                    ax.axhline(rows[0].value, color="gray", linestyle="--", label="uniform noise")
            ax.set_xticks(xs)
            ax.set_xticklabels(sweep.epsilons)
            ax.set_xlabel("epsilon")
            ax.set_ylabel(metric)
            ax.legend(fontsize=7, frameon=False)
            fig.tight_layout()
        written.append(_save(fig, out_dir / f"sweep_{metric}.png"))
    return written


def render_example_grid(examples: dict, path) -> Path:
    """Rows are budgets, columns are samples; ``examples`` maps label -> (N, C, H, W) images."""
    labels = list(examples)
    ncol = max(int(examples[k].shape[0]) for k in labels)
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(1.2 * ncol + 0.8, 1.2 * len(labels)))
        for r, lab in enumerate(labels):
            imgs = np.asarray(examples[lab])
            for c in range(ncol):
                ax = fig.add_subplot(len(labels), ncol, r * ncol + c + 1)
                ax.set_xticks([])
                ax.set_yticks([])
                if c < imgs.shape[0]:
                    ax.imshow(np.clip(np.transpose(imgs[c], (1, 2, 0)), 0, 1), interpolation="nearest")
                if c == 0:
                    ax.set_ylabel(lab, fontsize=7)
        fig.tight_layout()
    return _save(fig, Path(path))
