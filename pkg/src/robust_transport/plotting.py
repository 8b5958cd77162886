"""Figures and gnuplot scripts for sweep results.

Rendering uses the non-interactive Agg backend so it works headless.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGURE_WIDTH = 9.0
FIGURE_HEIGHT = 3.6
DPI = 120
STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "robust-transport",
}


def remove_spines(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)


def _mean_by(rows, key, value, where=None):
    acc = defaultdict(list)
    for r in rows:
        if where is None or where(r):
            acc[key(r)].append(float(r[value]))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def render_sweep(rows, path) -> None:
    """Two panels at the first rho of the grid: filtered W_{1,k} error vs eps
    for each k, and naive vs filtered mean error vs eps."""
    rows = list(rows)
    if not rows:
        return
    rho0 = min(float(r["rho"]) for r in rows)
    at_rho = [r for r in rows if float(r["rho"]) == rho0]
    ks = sorted({int(r["k"]) for r in at_rho})
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(FIGURE_WIDTH, FIGURE_HEIGHT))
        for k in ks:
            m = _mean_by(at_rho, lambda r: float(r["eps"]), "w1k_filtered_vs_clean",
                         lambda r, k=k: int(r["k"]) == k)
            ax1.plot(list(m), list(m.values()), marker="o", label=f"k = {k}")
        ax1.set_xlabel("eps")
        ax1.set_ylabel("filtered W1,k error")
        ax1.legend(frameon=False)
        first_k = [r for r in at_rho if int(r["k"]) == ks[0]]
        for col, lab in (("mean_err_naive", "naive"), ("mean_err_filtered", "filtered")):
            m = _mean_by(first_k, lambda r: float(r["eps"]), col)
            ax2.plot(list(m), list(m.values()), marker="o", label=lab)
        ax2.set_xlabel("eps")
        ax2.set_ylabel("mean error")
        ax2.legend(frameon=False)
        for ax in (ax1, ax2):
            remove_spines(ax)
            _log_if_positive(ax)
        fig.suptitle(f"rho = {rho0:g}")
        fig.tight_layout()
        fig.savefig(path, dpi=DPI, metadata={"Software": None})
        plt.close(fig)


def render_dro(rows, path) -> None:
    """Excess risk against its bound, one point per trial."""
    rows = list(rows)
    if not rows:
        return
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(FIGURE_HEIGHT * 1.3, FIGURE_HEIGHT))
        b = np.array([float(r["bound"]) for r in rows])
        e = np.array([float(r["excess_risk"]) for r in rows])
        ax.scatter(b, e, s=10)
        hi = max(b.max(), e.max(), 1e-12)
        ax.plot([0, hi], [0, hi], color="0.5", lw=0.8)
        ax.set_xlabel("bound 2 Lip tau")
        ax.set_ylabel("excess risk")
        remove_spines(ax)
        fig.tight_layout()
        fig.savefig(path, dpi=DPI, metadata={"Software": None})
        plt.close(fig)


def _log_if_positive(ax):
    for line in ax.get_lines():
        x, y = line.get_xdata(), line.get_ydata()
        if len(x) == 0 or np.any(np.asarray(x) <= 0) or np.any(np.asarray(y) <= 0):
            return
    ax.set_xscale("log")
    ax.set_yscale("log")


def write_gnuplot_script(path, csv_name: str, ks, columns: dict) -> None:
    """Emit a gnuplot script that plots filtered W_{1,k} error vs eps from
    ``csv_name`` (one series per k, averaged with ``smooth unique``).

    ``columns`` maps header names to 1-based column numbers.
    """
    c_eps, c_k = columns["eps"], columns["k"]
    c_f = columns["w1k_filtered_vs_clean"]
    series = ", \\\n     ".join(
        f"'{csv_name}' skip 1 using (column({c_k}) == {k} ? column({c_eps}) : 1/0):{c_f} "
        f"smooth unique with linespoints title 'k = {k}'"
        for k in ks)
    text = f"""# gnuplot script: filtered W1,k error against eps
set datafile separator ','
set logscale xy
set xlabel 'eps'
set ylabel 'filtered W1,k error'
set terminal pngcairo size 800,500
set output 'plot_gnuplot.png'
plot {series}
"""
    Path(path).write_text(text, encoding="utf-8")
