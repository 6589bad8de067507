"""Figures written to files with the Agg backend.

PNG metadata carries the config hash and seed; the software tag and
timestamps are dropped so reruns produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5.0) - 1.0) / 2.0
fig_width = 6.0

params = {
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "figure.figsize": (fig_width, fig_width * golden_mean),
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path, meta: dict | None):
    text = " ".join(f"{k}={v}" for k, v in (meta or {}).items())
    fig.savefig(path, metadata={"Software": None, "Description": text})
    plt.close(fig)
    return path


def plot_loss(history, path, meta: dict | None = None):
    """Training loss per epoch (log scale)."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ep = [h[0] for h in history]
        loss = [h[1] for h in history]
        ax.semilogy(ep, loss, color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("batch mean loss")
        return _save(fig, path, meta)


def plot_trajectory(traj, path, b: int = 0, ybar=None, meta: dict | None = None):
    """Outputs and control actions of rollout ``b``, one line per node."""
    with plt.rc_context(params):
        fig, (ax_y, ax_u) = plt.subplots(2, 1, sharex=True, figsize=(fig_width, fig_width * 0.8))
        ax_y.plot(traj.times, traj.y[:, b, :])
        if ybar is not None:
            ax_y.axhline(float(np.mean(ybar)), color="k", ls="--", lw=0.8)
        ax_u.plot(traj.times, traj.u[:, b, :])
        ax_y.set_ylabel("y")
        ax_u.set_ylabel("u")
        ax_u.set_xlabel("time [s]")
        return _save(fig, path, meta)


def plot_compare(rows, path, meta: dict | None = None):
    """Bar chart of mean transient and steady-state cost with std error bars."""
    rows = [r for r in rows if r.get("status") == "ok"]
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, 2)
        names = [r["name"] for r in rows]
        x = np.arange(len(rows))
        for ax, key, title in ((axes[0], "transient", "transient cost"), (axes[1], "steady", "steady-state cost")):
            ax.bar(x, [r[f"{key}_mean"] for r in rows], yerr=[r[f"{key}_std"] for r in rows], color="C0", capsize=3)
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=30, ha="right")
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path, meta)
