"""Figures written next to the CSV exports.

PNG output is byte-stable across reruns: the Agg backend is forced and the
``Software`` metadata entry is dropped.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle as RectPatch  # noqa: E402

from . import metrics  # noqa: E402
from .dataset import Rectangle  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "savefig.bbox": "tight",
}
METHOD_COLOURS = {"MCD": "tab:orange", "DEN": "tab:blue"}
FIELD_LABELS = {
    "rmse": "RMSE [m]",
    "data_var": "data variance [m$^2$]",
    "model_var": "model variance [m$^2$]",
    "total_var": "total variance [m$^2$]",
}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def plot_vs_s(table: Mapping[str, tuple[Sequence[int], Sequence[float]]], ylabel: str,
              path: str | Path) -> None:
    """One line per method over the number of passes / members."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        for method, (s_values, values) in table.items():
            ax.plot(s_values, values, marker="o", label=method,
                    color=METHOD_COLOURS.get(method))
        ax.set_xscale("log", base=2)
        ax.set_xticks(list(next(iter(table.values()))[0]))
        ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
        ax.set_xlabel("S")
        ax.set_ylabel(ylabel)
        ax.legend()
        _save(fig, path)


def plot_sparsification(curves: Mapping[str, metrics.SparsificationCurve],
                        path: str | Path) -> None:
    """Confidence and oracle curves (left) and their difference (right)."""
    with plt.rc_context(STYLE):
        fig, (ax_c, ax_a) = plt.subplots(1, 2, figsize=(6.8, 2.6))
        for method, c in curves.items():
            colour = METHOD_COLOURS.get(method)
            ax_c.plot(c.fractions, c.rmse_conf, color=colour, label=f"{method} confidence")
            ax_c.plot(c.fractions, c.rmse_orac, color=colour, ls="--", label=f"{method} oracle")
            ax_a.plot(c.fractions, c.alpha, color=colour, label=f"{method} (AUCO {c.auco:.3g})")
        ax_c.set_xlabel("fraction of removed locations")
        ax_c.set_ylabel("RMSE of remaining [m]")
        ax_c.legend()
        ax_a.set_xlabel("fraction of removed locations")
        ax_a.set_ylabel("oracle - confidence [m]")
        ax_a.legend()
        _save(fig, path)


def plot_heatmaps(records: metrics.EvalRecords, cell_size: float, path: str | Path,
                  region: Rectangle | None = None, title: str = "") -> None:
    """Error and the three variance components binned over the user area."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(11, 2.8), sharey=True)
        for ax, name in zip(axes, metrics.HEATMAP_FIELDS):
            hm = metrics.heatmap(records, cell_size, name)
            nx, ny = hm.values.shape
            extent = (hm.origin[0], hm.origin[0] + nx * cell_size,
                      hm.origin[1], hm.origin[1] + ny * cell_size)
            im = ax.imshow(np.ma.masked_invalid(hm.values.T), origin="lower", extent=extent,
                           cmap="magma", aspect="equal", interpolation="nearest")
            fig.colorbar(im, ax=ax, shrink=0.8)
            ax.set_title(FIELD_LABELS[name])
            ax.set_xlabel("x [m]")
            ax.grid(False)
            if region is not None:
                ax.add_patch(RectPatch((region.x_min, region.y_min),
                                       region.x_max - region.x_min, region.y_max - region.y_min,
                                       fill=False, ec="limegreen", lw=1.5))
        axes[0].set_ylabel("y [m]")
        if title:
            fig.suptitle(title)
        _save(fig, path)
