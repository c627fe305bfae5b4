"""Figures rendered next to the summary tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "legend.frameon": False,
    }
)


def _label(row) -> str:
    parts = [row.pooling]
    if row.pooling == "spapool":
        parts += [row.selection, row.aggregator]
    if row.aux_loss != "none":
        parts.append(row.aux_loss)
    return "/".join(parts)


def plot_summary(summary, path: str | Path) -> Path:
    """Grouped bars of mean test accuracy with population-std error bars."""
    path = Path(path)
    datasets = sorted({r.dataset for r in summary.rows})
    configs = sorted({_label(r) for r in summary.rows})
    width = 0.8 / max(len(configs), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(datasets) + 1), 3.2))
    x = np.arange(len(datasets))
    for k, cfg in enumerate(configs):
        means, stds = [], []
        for d in datasets:
            match = [r for r in summary.rows if r.dataset == d and _label(r) == cfg]
            means.append(100 * match[0].mean_acc if match else np.nan)
            stds.append(100 * match[0].std_acc if match else 0.0)
        ax.bar(x + (k - (len(configs) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=cfg)
    ax.set_xticks(x)
    ax.set_xticklabels(datasets)
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_curves(records, path: str | Path) -> Path:
    """Validation accuracy per epoch, averaged over repeats of each config."""
    path = Path(path)
    groups: dict[str, list[list[float]]] = {}
    for rec in records:
        if rec["result"]["failed"]:
            continue
        groups.setdefault(f"{rec['dataset']} {rec['signature']}", []).append(rec["result"]["val_acc"])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, curves in sorted(groups.items()):
        n = max(len(c) for c in curves)
        # runs stop at different epochs; hold each at its last value
        padded = np.array([c + [c[-1]] * (n - len(c)) for c in curves])
        ax.plot(np.arange(1, n + 1), 100 * padded.mean(axis=0), lw=1, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy (%)")
    if groups:
        ax.legend(fontsize=6)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
