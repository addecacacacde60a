"""Report figures written next to the key=value output of ``evaluate`` and ``bench``."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 150,
    "savefig.bbox": "tight",
    "font.family": "serif",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_recall_curves(rte, rre, path, rotation_limits=(1.0, 2.0, 5.0), max_translation=1.0):
    """Fraction of queries within a translation threshold, one curve per rotation limit.

    Failed queries should be passed as ``inf`` errors so they count as misses.
    """
    rte = np.asarray(rte, dtype=float)
    rre = np.asarray(rre, dtype=float)
    taus = np.linspace(0.0, max_translation, 201)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for lim in rotation_limits:
            ok = rre <= lim
            ax.plot(taus, [np.mean(ok & (rte <= t)) for t in taus], label=f"RRE <= {lim:g} deg")
        ax.set_xlabel("translation threshold (m)")
        ax.set_ylabel("recall")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def plot_error_histograms(rte, rre, path):
    rte = np.asarray(rte, dtype=float)
    rre = np.asarray(rre, dtype=float)
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for ax, v, label in ((a, rte, "RTE (m)"), (b, rre, "RRE (deg)")):
            v = v[np.isfinite(v)]
            if len(v):
                ax.hist(v, bins=30, color="0.35")
            ax.set_xlabel(label)
        a.set_ylabel("queries")
        return _save(fig, path)


def plot_stage_latency(latency, path):
    """Bar chart of mean per-stage latency with the 95th percentile as a whisker."""
    names = list(latency)
    mean = np.array([latency[n]["mean"] for n in names]) * 1e3
    p95 = np.array([latency[n]["p95"] for n in names]) * 1e3
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(names, mean, color="0.45", yerr=[np.zeros_like(mean), np.maximum(p95 - mean, 0)], capsize=3)
        ax.set_ylabel("latency (ms)")
        ax.grid(axis="x", visible=False)
        return _save(fig, path)
