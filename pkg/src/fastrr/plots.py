"""Matplotlib figure rendering for CLI report outputs.

Each helper writes one figure file next to the corresponding CSV/JSON
output. The Agg backend keeps rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIGSIZE = (6.4, 4.0)
_DPI = 150


def _finish(fig, ax, path):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_balance_histogram(stats, path, threshold=None):
    """Histogram of accepted balance statistics."""
    stats = np.asarray(stats, dtype=np.float64)
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    bins = min(50, max(10, stats.size // 20))
    ax.hist(stats, bins=bins, color="steelblue", alpha=0.85)
    if threshold is not None:
        ax.axvline(threshold, color="firebrick", linestyle="--", label="acceptance threshold")
        ax.legend(frameon=False)
    ax.set_xlabel("balance statistic")
    ax.set_ylabel("accepted randomizations")
    _finish(fig, ax, path)


def save_test_distribution(result, path):
    """Permutation distribution with the observed statistic marked."""
    dist = np.asarray(result.stat_distribution, dtype=np.float64)
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    bins = min(60, max(10, dist.size // 20))
    ax.hist(dist, bins=bins, color="gray", alpha=0.8)
    ax.axvline(result.tau_obs, color="firebrick", label=f"observed = {result.tau_obs:.4g}")
    if result.fi is not None:
        ax.axvspan(result.fi[0], result.fi[1], color="steelblue", alpha=0.2,
                   label=f"fiducial interval (alpha={result.alpha})")
    ax.set_xlabel("test statistic over accepted pool")
    ax.set_ylabel("count")
    ax.set_title(f"p = {result.p_value:.4g}")
    ax.legend(frameon=False)
    _finish(fig, ax, path)


def save_sweep_curve(rows, path):
    """p-value (and FI width when present) against acceptance probability."""
    ok = [r for r in rows if r.get("status") == "ok"]
    probs = [r["accept_prob"] for r in ok]
    pvals = [r["p_value"] for r in ok]
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.plot(probs, pvals, "o-", color="steelblue", label="p-value")
    ax.set_xscale("log")
    ax.set_xlabel("acceptance probability")
    ax.set_ylabel("p-value")
    widths = [r.get("fi_width") for r in ok]
    if any(w is not None for w in widths):
        ax2 = ax.twinx()
        ax2.plot(probs, widths, "s--", color="darkorange", label="FI width")
        ax2.set_ylabel("fiducial interval width")
        ax2.spines["top"].set_visible(False)
    _finish(fig, ax, path)


def save_bench_bars(rows, path):
    """Grouped bars of median seconds per path and phase."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["path"], r["phase"]), []).append(r["seconds"])
    paths = sorted({p for p, _ in groups})
    phases = sorted({ph for _, ph in groups})
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    width = 0.8 / max(1, len(phases))
    x = np.arange(len(paths))
    for i, phase in enumerate(phases):
        med = [float(np.median(groups.get((p, phase), [np.nan]))) for p in paths]
        ax.bar(x + i * width, med, width=width, label=phase)
    ax.set_xticks(x + width * (len(phases) - 1) / 2)
    ax.set_xticklabels(paths)
    ax.set_ylabel("median seconds")
    ax.legend(frameon=False)
    _finish(fig, ax, path)
