"""Figure rendering for connectivity matrices and protocol summaries.

Every function writes a PNG next to the delimited output it illustrates; the
Agg backend keeps this headless-safe.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .connectivity import FncMatrix  # noqa: E402
from .training import TrialReport  # noqa: E402


def save_fnc_heatmap(fnc: FncMatrix | np.ndarray, out_path, title: str | None = None,
                     domain_edges: Sequence[int] | None = None):
    """Heatmap of an FNC matrix; rows attend to columns for attention kind.

    ``domain_edges`` draws separator lines after the given component indices,
    which makes block structure visible (e.g. the important/noise boundary).
    """
    if isinstance(fnc, FncMatrix):
        values = fnc.values
        if title is None:
            title = f"{fnc.kind} FNC" + (f" ({fnc.tag})" if fnc.tag else "")
    else:
        values = np.asarray(fnc, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.4, 4.6))
    im = ax.imshow(values, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if domain_edges:
        for e in domain_edges:
            ax.axhline(e - 0.5, color="white", linewidth=0.8)
            ax.axvline(e - 0.5, color="white", linewidth=0.8)
    ax.set_xlabel("attended component j")
    ax.set_ylabel("attending component i")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def save_summary_figure(reports: Sequence[TrialReport], out_path):
    """Two panels: per-trial validation metrics by fold, and loss curves."""
    if not reports:
        raise ValueError("no trial reports to plot")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.0))

    folds = sorted({r.fold for r in reports})
    rng = np.random.default_rng(0)  # jitter only, cosmetic
    for r in reports:
        x = r.fold + rng.uniform(-0.12, 0.12)
        ax1.plot(x, r.val_accuracy, "o", color="tab:blue", alpha=0.6, markersize=5)
        ax1.plot(x, r.val_auc, "s", color="tab:orange", alpha=0.6, markersize=5)
    accs = [r.val_accuracy for r in reports]
    aucs = [r.val_auc for r in reports]
    ax1.axhline(float(np.mean(accs)), color="tab:blue", linestyle="--", linewidth=1,
                label=f"accuracy mean {np.mean(accs):.3f}")
    ax1.axhline(float(np.mean(aucs)), color="tab:orange", linestyle="--", linewidth=1,
                label=f"auc mean {np.mean(aucs):.3f}")
    ax1.set_xticks(folds)
    ax1.set_xlabel("fold")
    ax1.set_ylabel("validation metric")
    ax1.set_ylim(0.0, 1.05)
    ax1.legend(loc="lower right", fontsize=8)
    ax1.set_title("validation metrics per trial")

    for r in reports:
        ax2.plot(range(1, len(r.train_losses) + 1), r.train_losses,
                 color="gray", alpha=0.4, linewidth=0.8)
    mean_curve = np.mean([r.train_losses for r in reports], axis=0)
    ax2.plot(range(1, len(mean_curve) + 1), mean_curve, color="black",
             linewidth=1.8, label="mean")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("training loss")
    ax2.legend(fontsize=8)
    ax2.set_title("loss curves")

    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
