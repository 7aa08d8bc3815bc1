"""Report figures. Uses the Figure API directly so no global pyplot state or
display backend is involved, and strips PNG metadata so reruns are byte-identical."""
from __future__ import annotations

import numpy as np
from matplotlib.figure import Figure

from .errors import IOFailure

STYLE = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}
PALETTE = ("#2c3e50", "#2980b9", "#27ae60", "#c0392b", "#8e44ad", "#d35400")


def _figure(ncols=1, width=4.0, height=3.0):
    import matplotlib as mpl
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(width * ncols, height), dpi=100)
        axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def _save(fig, path) -> None:
    fig.tight_layout()
    try:
        fig.savefig(path, format="png", metadata={"Software": None})
    except OSError as e:
        raise IOFailure(str(e)) from e


def training_curves(rows, path) -> None:
    """Loss terms, accuracy and mean active rank per epoch."""
    ep = [r["epoch"] for r in rows]
    fig, (a0, a1, a2) = _figure(3)
    for i, key in enumerate(("ce", "sem", "overlap")):
        a0.plot(ep, [r[key] for r in rows], color=PALETTE[i], label=key)
    a0.set_yscale("log")
    a0.set_xlabel("epoch")
    a0.legend(frameon=False)
    a1.plot(ep, [r["accuracy"] for r in rows], color=PALETTE[0])
    a1.set_ylim(0, 1.02)
    a1.set_xlabel("epoch")
    a1.set_ylabel("train accuracy")
    a2.plot(ep, [r["mean_rank"] for r in rows], color=PALETTE[3])
    a2.set_xlabel("epoch")
    a2.set_ylabel("mean active rank")
    _save(fig, path)


def collapse_curves(rows, K: int, path) -> None:
    """Baseline stable rank and within-class trace against the subspace model's rank."""
    ep = [r["epoch"] for r in rows]
    fig, (a0, a1) = _figure(2)
    a0.plot(ep, [r["baseline_min_srank"] for r in rows], color=PALETTE[3], label="baseline min")
    a0.plot(ep, [r["baseline_max_srank"] for r in rows], color=PALETTE[3], ls="--",
            label="baseline max")
    if rows and "amp_min_srank" in rows[0]:
        a0.plot(ep, [r["amp_min_srank"] for r in rows], color=PALETTE[1], label="subspace")
    a0.axhline(1.5, color="0.6", lw=0.8)
    a0.set_ylim(0.9, K + 0.2)
    a0.set_xlabel("epoch")
    a0.set_ylabel("stable rank")
    a0.legend(frameon=False)
    a1.plot(ep, [r["within_trace"] for r in rows], color=PALETTE[0], label="tr(Sigma_W)")
    a1.plot(ep, [r["etf_deviation"] for r in rows], color=PALETTE[2], label="ETF deviation")
    a1.set_yscale("log")
    a1.set_xlabel("epoch")
    a1.legend(frameon=False)
    _save(fig, path)


def rank_histogram(ranks, K: int, path) -> None:
    ranks = np.asarray(ranks, dtype=int)
    fig, (ax,) = _figure()
    ax.bar(np.arange(K + 1), np.bincount(ranks, minlength=K + 1), color=PALETTE[1])
    ax.set_xlabel("active rank")
    ax.set_ylabel("classes")
    _save(fig, path)


def sweep_plot(rows, path) -> None:
    param = rows[0]["param"]
    x = np.array([r["value"] for r in rows])
    fig, (a0, a1) = _figure(2)
    a0.plot(x, [r["accuracy"] for r in rows], "o-", color=PALETTE[0])
    a0.set_ylabel("test accuracy")
    a1.plot(x, [r["mean_rank"] for r in rows], "o-", color=PALETTE[3])
    a1.set_ylabel("mean active rank")
    for ax in (a0, a1):
        ax.set_xlabel(param)
        if x.min() > 0 and x.max() / x.min() > 50:
            ax.set_xscale("log")
    _save(fig, path)


def ablation_bars(rows, path) -> None:
    names = [r["variant"] for r in rows]
    fig, axes = _figure(3, width=3.2)
    for ax, key, col in zip(axes, ("accuracy", "sem", "overlap"), PALETTE):
        vals = np.array([r[key] for r in rows], dtype=float)
        ax.bar(range(len(names)), np.nan_to_num(vals), color=col)
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_title(key)
    _save(fig, path)


def explanation_panel(expl, path) -> None:
    """Capacity-weighted heatmaps for each active direction with peaks marked."""
    n = max(len(expl.parts), 1)
    fig, axes = _figure(n, width=2.2, height=2.4)
    for ax, part in zip(axes, expl.parts):
        ax.imshow(part.heatmap, cmap="viridis")
        ax.plot(part.peak[1], part.peak[0], "r+", ms=10)
        ax.set_title(f"k={part.direction}  {part.contribution:.3g}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    if not expl.parts:
        axes[0].set_axis_off()
    _save(fig, path)
