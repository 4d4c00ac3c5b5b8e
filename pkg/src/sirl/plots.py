"""Report figures: accuracy bars, loss curves, latent scatter.

Everything renders through the Agg backend straight to files, with fixed
metadata so repeated runs write identical images.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METADATA = {"Software": "sirl"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_METADATA)
    plt.close(fig)
    return path


def save_accuracy_bars(aggregates, path) -> Path:
    """Mean test accuracy per variant with SD whiskers."""
    names = list(aggregates)
    means = [aggregates[n].mean_accuracy for n in names]
    sds = [aggregates[n].sd for n in names]
    fig, ax = plt.subplots(figsize=(1.2 * max(len(names), 4), 3.2))
    ax.bar(range(len(names)), means, yerr=sds, capsize=4, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.axhline(0.5, color="grey", linewidth=0.8, linestyle="--")
    fig.tight_layout()
    return _save(fig, path)


def _mean_series(reports, phase_key, series_key):
    stacks = [
        r for r in reports
        if (r.pretrain_history if phase_key == "pretrain" else r.finetune_history)[series_key]
    ]
    if not stacks:
        return None
    series = [
        (r.pretrain_history if phase_key == "pretrain" else r.finetune_history)[series_key]
        for r in stacks
    ]
    return np.mean(np.array(series), axis=0)


def save_loss_curves(aggregates, path) -> Path:
    """Trial-averaged loss per epoch: reconstruction left, classification right."""
    fig, (ax_pre, ax_fin) = plt.subplots(1, 2, figsize=(8.5, 3.2))
    for name, agg in aggregates.items():
        recon = _mean_series(agg.trials, "pretrain", "recon")
        if recon is not None:
            ax_pre.plot(range(1, len(recon) + 1), recon, label=name)
        cls = _mean_series(agg.trials, "finetune", "classification")
        if cls is not None:
            ax_fin.plot(range(1, len(cls) + 1), cls, label=name)
    ax_pre.set_xlabel("epoch")
    ax_pre.set_ylabel("reconstruction loss")
    ax_fin.set_xlabel("epoch")
    ax_fin.set_ylabel("classification loss")
    for ax in (ax_pre, ax_fin):
        if ax.lines:
            ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def save_latent_scatter(rows, path, title="") -> Path:
    """2-D projected latents, one color per subject, test split hollow."""
    subjects = sorted({r["subject_id"] for r in rows})
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    for i, subject in enumerate(subjects):
        for split, face in (("train", cmap(i % 10)), ("test", "none")):
            pts = np.array(
                [r["pc"] for r in rows if r["subject_id"] == subject and r["split"] == split]
            )
            if len(pts) == 0:
                continue
            ax.scatter(
                pts[:, 0],
                pts[:, 1],
                s=18,
                facecolors=face,
                edgecolors=cmap(i % 10),
                label=f"{subject} ({split})",
            )
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)
