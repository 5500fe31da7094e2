"""Figure rendering for the CLI report path.

Figures are drawn on the Agg canvas without touching pyplot state and
saved as PNG with the software tag stripped, so identical inputs produce
identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

DPI = 100
_PNG_META = {"Software": None}


def _figure(width: float = 5.0, height: float = 3.6, ncols: int = 1):
    fig = Figure(figsize=(width * ncols, height), dpi=DPI)
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def save_figure(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def training_curves(metrics: list, path) -> Path:
    """Train/test log-likelihood and ESS against the update index."""
    fig, (ax, ax2) = _figure(ncols=2)
    t = np.array([r["t"] for r in metrics])
    ax.plot(t, [r["ll_train"] for r in metrics], "-", color="k", label="train")
    test = np.array([r["ll_test"] for r in metrics], dtype=float)
    if np.isfinite(test).any():
        ax.plot(t, test, "--", color="tab:red", label="test")
    ax.set_xlabel("update")
    ax.set_ylabel("log-likelihood")
    ax.legend(frameon=False)
    ax2.plot(t, [r["ess"] for r in metrics], color="tab:blue")
    ax2.set_xlabel("update")
    ax2.set_ylabel("ESS / R")
    ax2.set_ylim(0, 1.05)
    return save_figure(fig, path)


def projection(data_xy: np.ndarray, sample_xy: np.ndarray | None, path, separator=None) -> Path:
    """Scatter of data (black) and samples (red) in the PC1-PC2 plane."""
    fig, (ax,) = _figure(4.2, 4.0)
    ax.plot(data_xy[:, 0], data_xy[:, 1], ".", ms=2, color="k", alpha=0.5, label="data")
    if sample_xy is not None and len(sample_xy):
        ax.plot(sample_xy[:, 0], sample_xy[:, 1], ".", ms=2, color="tab:red", alpha=0.5,
                label="samples")
    if separator is not None:
        nx, ny = separator.normal
        lim = np.array(ax.get_xlim()) if abs(ny) > 1e-12 else None
        if lim is not None:
            ax.plot(lim, (separator.offset - nx * lim) / ny, ":", color="grey")
        else:
            ax.axvline(separator.offset / nx, ls=":", color="grey")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(frameon=False, markerscale=4)
    return save_figure(fig, path)


def free_energy_curve(curve, path, ylabel: str = "free energy") -> Path:
    fig, (ax,) = _figure()
    ax.plot(curve.grid, curve.values, color="k")
    ax.plot(curve.minima, curve.minima_values, "o", color="tab:red")
    ax.set_xlabel("m")
    ax.set_ylabel(ylabel)
    title = ", ".join(f"{k}={v:g}" for k, v in curve.params.items())
    if title:
        ax.set_title(title, fontsize=9)
    return save_figure(fig, path)


def autocorrelation(result, path) -> Path:
    fig, (ax,) = _figure()
    t = np.arange(result.curve.size)
    ax.plot(t, result.curve, color="k")
    if np.isfinite(result.tau_exp) and result.tau_exp > 0:
        ax.plot(t, np.exp(-t / result.tau_exp), "--", color="tab:red",
                label=f"exp(-t/{result.tau_exp:.3g})")
        ax.legend(frameon=False)
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.set_xlabel("lag (sweeps)")
    ax.set_ylabel("C(t)")
    return save_figure(fig, path)


def acceptance_profile(acceptance, path, target: float | None = None) -> Path:
    fig, (ax,) = _figure()
    acc = np.asarray(acceptance, dtype=float)
    ax.plot(np.arange(acc.size), acc, "o-", color="k")
    if target is not None:
        ax.axhline(target, ls=":", color="grey")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("pair (j, j+1)")
    ax.set_ylabel("swap acceptance")
    return save_figure(fig, path)


def log_z_estimates(labels, values, errors, path, exact: float | None = None) -> Path:
    fig, (ax,) = _figure()
    x = np.arange(len(labels))
    ax.errorbar(x, values, yerr=errors, fmt="o", color="k", capsize=3)
    if exact is not None:
        ax.axhline(exact, ls="--", color="tab:red", label="exact")
        ax.legend(frameon=False)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20)
    ax.set_ylabel("log Z")
    return save_figure(fig, path)
