"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import numpy as np

METRICS = (("bleu4", "BLEU-4"), ("rouge_l", "ROUGE-L"), ("cider_d", "CIDEr-D"))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_score_grid(rows: list[dict], path) -> Path:
    """One heat map per metric, training attention N down, evaluation M across."""
    plt = _pyplot()
    ns = sorted({r["N"] for r in rows})
    ms = sorted({r["M"] for r in rows})
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.4))
    for ax, (key, label) in zip(axes, METRICS):
        grid = np.full((len(ns), len(ms)), np.nan)
        for r in rows:
            grid[ns.index(r["N"]), ms.index(r["M"])] = r[key]
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        for a in range(len(ns)):
            for b in range(len(ms)):
                ax.text(b, a, f"{grid[a, b]:.3f}", ha="center", va="center", color="w", fontsize=9)
        ax.set_xticks(range(len(ms)), [str(m) for m in ms])
        ax.set_yticks(range(len(ns)), [str(n) for n in ns])
        ax.set_xlabel("M (evaluation)")
        ax.set_ylabel("N (training)")
        ax.set_title(label)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_log(entries: list[dict], path) -> Path:
    plt = _pyplot()
    it = [e["iteration"] for e in entries]
    loss = [np.nan if e["loss"] is None else e["loss"] for e in entries]
    fig, ax1 = plt.subplots(figsize=(6, 3.6))
    ax1.plot(it, loss, "o-", color="tab:blue", label="train loss")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(it, [e["val_cider"] for e in entries], "s-", color="tab:red", label="val CIDEr-D")
    ax2.set_ylabel("val CIDEr-D", color="tab:red")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_attention(weights: list, words: list[str], m_attention: int, path) -> Path:
    """Attention weights per iteration (rows) over regions (columns)."""
    plt = _pyplot()
    mat = np.asarray(weights)
    fig, ax = plt.subplots(figsize=(1 + 0.5 * mat.shape[1], 1 + 0.3 * mat.shape[0]))
    ax.imshow(mat, cmap="magma", vmin=0.0, vmax=1.0, aspect="auto")
    labels = [f"{words[k // m_attention] if k // m_attention < len(words) else '<eos>'}.{k % m_attention + 1}"
              for k in range(mat.shape[0])]
    ax.set_yticks(range(mat.shape[0]), labels, fontsize=7)
    ax.set_xlabel("region")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
