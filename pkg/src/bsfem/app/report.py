"""PNG figures for a finished run, written next to the CSV output.

Uses the non-interactive Agg backend; nothing is shown on screen.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..diagnostics import DIAG_COLUMNS  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.5),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}

TIME_SERIES = (
    ("masses", ("mass_u", "mass_w", "mass_z", "mass_wz", "combined_mass")),
    ("limit", ("g_residual_cum", "comp_gap", "fb_measure")),
    ("extrema", ("min_w", "max_u_trace")),
)


def _columns(records):
    rows = np.array([r.row() for r in records], dtype=float).reshape(-1, len(DIAG_COLUMNS))
    return {c: rows[:, j] for j, c in enumerate(DIAG_COLUMNS)}


def plot_time_series(records, path, title=""):
    """Three stacked panels: masses, limit diagnostics, extrema."""
    cols = _columns(records)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(TIME_SERIES), 1, sharex=True,
                                 figsize=(7.0, 7.5))
        for ax, (label, names) in zip(axes, TIME_SERIES):
            for n in names:
                ax.plot(cols["time"], cols[n], label=n, lw=1.2)
            ax.set_ylabel(label)
            ax.legend(fontsize=7, ncol=3, loc="best")
        axes[-1].set_xlabel("t")
        if title:
            axes[0].set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def _surface_parameter(points):
    """Polar angle in 2D, x1 in 3D: a 1D coordinate for profile plots."""
    if points.shape[1] == 2:
        return np.arctan2(points[:, 1], points[:, 0])
    return points[:, 0]


def plot_surface_profiles(snapshots: Sequence, path, title=""):
    """``W``, ``Z`` and traced ``U`` along the surface for each snapshot.

    ``snapshots`` holds ``(time, surface_points, U_trace, W, Z)`` tuples.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10.0, 3.6), sharex=True)
        cmap = plt.get_cmap("viridis")
        n = max(len(snapshots), 1)
        for k, (t, pts, u, w, z) in enumerate(snapshots):
            s = _surface_parameter(np.asarray(pts))
            order = np.argsort(s)
            for ax, vals in zip(axes, (u, w, z)):
                ax.plot(s[order], np.asarray(vals)[order], color=cmap(k / n),
                        lw=1.0, label=f"t={t:.3g}")
        for ax, name in zip(axes, ("U on surface", "W", "Z")):
            ax.set_title(name)
            ax.set_xlabel("angle" if len(snapshots) and np.asarray(snapshots[0][1]).shape[1] == 2
                          else "x1")
        axes[0].legend(fontsize=6)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_comparison(runs: dict, column, path, title=""):
    """One diagnostics column against time for several runs (e.g. a sweep)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, records in runs.items():
            cols = _columns(records)
            ax.plot(cols["time"], cols[column], label=label, lw=1.2)
        ax.set_xlabel("t")
        ax.set_ylabel(column)
        ax.legend()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
