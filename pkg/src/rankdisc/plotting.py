"""Figures written next to the CSV reports.

Figures are built on an explicit Agg canvas, so importing this module never
touches the global pyplot backend.
"""

from __future__ import annotations

import math

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

LOSS_STYLES = (("ce", "CE", "C0"), ("bce", "BCE", "C1"), ("mse", "MSE", "C2"), ("total", "total", "k"))


def _new_figure(ncols=1, width=4.2, height=3.2):
    fig = Figure(figsize=(width * ncols, height))
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def _save(fig, path):
    fig.tight_layout()
    # no Software/Date entries so reruns write identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_training(report, path):
    """Loss components per epoch and, when available, unlabelled ACC."""
    epochs = [e.epoch for e in report.epochs]
    accs = [e.unlabelled_acc for e in report.epochs]
    has_acc = any(not math.isnan(a) for a in accs)
    fig, axes = _new_figure(2 if has_acc else 1)
    ax = axes[0]
    for key, label, color in LOSS_STYLES:
        values = [getattr(e, key) for e in report.epochs]
        if key != "total" and not any(values):
            continue
        ax.plot(epochs, values, label=label, color=color, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"{report.stage} (seed {report.seed})")
    ax.legend(frameon=False, fontsize=8)
    if has_acc:
        ax = axes[1]
        ax.plot(epochs, accs, color="C3", lw=1.2)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("epoch")
        ax.set_ylabel("unlabelled ACC")
        omega = [e.omega for e in report.epochs]
        if any(omega):
            twin = ax.twinx()
            twin.plot(epochs, omega, color="0.6", lw=0.8, ls="--")
            twin.set_ylabel("consistency weight", color="0.4")
    _save(fig, path)


def plot_sweep(rows, path):
    """Unlabelled ACC against k on a log axis."""
    fig, axes = _new_figure()
    ax = axes[0]
    ks = [r.k for r in rows]
    ax.plot(ks, [r.unlabelled_acc for r in rows], "o-", color="C0", lw=1.2)
    ax.set_xscale("log")
    ax.set_xticks(ks)
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel("k (top-k rank statistics)")
    ax.set_ylabel("unlabelled ACC")
    _save(fig, path)
