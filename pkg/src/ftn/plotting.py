"""Figures written next to the CSV reports of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width=4.5, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return plt.subplots(figsize=(width, height or width * golden))


def plot_trace(trace, path) -> None:
    """Loss (left axis) and learning rate (right axis) against step."""
    steps = [r.step for r in trace.rows]
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(steps, [r.loss for r in trace.rows], color="tab:blue", lw=1.2, label="loss")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        lr_ax = ax.twinx()
        lr_ax.plot(steps, [r.lr for r in trace.rows], color="tab:gray", lw=0.8, ls="--")
        lr_ax.set_ylabel("learning rate")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_stage_costs(report, path, title="") -> None:
    """Per-stage GMACs, split into attention and everything else."""
    stages = {}
    for row in report.rows:
        parts = row.name.split(".")
        key = next((f"stage {int(parts[i + 1]) + 1}" for i, p in enumerate(parts) if p == "stages"),
                   parts[0] if row.group == "encoder" else row.group)
        stages[key] = stages.get(key, 0) + row.macs
    names = list(stages)
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.bar(names, [stages[n] / 1e9 for n in names], color="tab:blue")
        ax.set_ylabel("GMACs")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
