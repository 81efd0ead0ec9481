"""Matplotlib figures written next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# No timestamps or version strings in the files.
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_lambda_bounds(table: np.ndarray, d: int, path: str | Path, estimates: Sequence = ()) -> Path:
    """Lower/upper bound curves for lambda(d, .), optionally with estimates overlaid."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    xs, lo, hi = table[:, 0], table[:, 1], table[:, 2]
    ax.fill_between(xs, lo, hi, color="tab:blue", alpha=0.15, lw=0)
    ax.plot(xs, lo, color="tab:blue", label="lower")
    ax.plot(xs, hi, color="tab:red", label="upper")
    if d == 2:
        b = 1 / math.sqrt(6)
        ax.plot([b], [1 / 6], "k*", ms=9, label="(1/sqrt 6, 1/6)")
    if estimates:
        ex = [e.xi for e in estimates]
        ey = [e.lambda_hat for e in estimates]
        ee = [2 * e.stderr for e in estimates]
        ax.errorbar(ex, ey, yerr=ee, fmt="o", color="k", ms=3, capsize=2, label="estimate (2 se)")
    ax.set_xlabel("xi")
    ax.set_ylabel("lambda")
    ax.set_title(f"lambda({d}, xi) bounds")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_dgamma_bounds(table: np.ndarray, d: int, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    gs, lo, hi = table[:, 0], table[:, 1], table[:, 2]
    ax.fill_between(gs, lo, hi, color="tab:green", alpha=0.15, lw=0)
    ax.plot(gs, lo, color="tab:green", label="lower")
    ax.plot(gs, hi, color="tab:purple", label="upper")
    ax.axhline(d, color="0.5", ls=":", lw=1)
    ax.set_xlabel("gamma")
    ax.set_ylabel("d_gamma")
    ax.set_title(f"d_gamma bounds, d = {d}")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_scaling_fits(estimates: Sequence, path: str | Path) -> Path:
    """Per-scale quantiles of normalized log D against log eps, with fitted lines."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for e in estimates:
        ks = np.array([row["k"] for row in e.per_scale])
        q = np.array([row["quantile_log_distance"] for row in e.per_scale])
        x = -ks * math.log(2)
        (line,) = ax.plot(x, q, "o", ms=3)
        intercept = np.mean(q - e.lambda_hat * x)
        ax.plot(x, intercept + e.lambda_hat * x, "-", color=line.get_color(), lw=1,
                label=f"xi={e.xi:.3g}: {e.lambda_hat:.3f}")
    ax.set_xlabel("log eps")
    ax.set_ylabel("quantile of log D - log(1 + eps)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_thick_points(report, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    x = np.array(report.ks) * math.log(2)
    m = np.array(report.mean_counts, dtype=float)
    ok = m > 0
    ax.plot(x[ok], np.log(m[ok]), "o", label="log mean count")
    if ok.sum() >= 2:
        c = np.polyfit(x[ok], np.log(m[ok]), 1)
        ax.plot(x[ok], np.polyval(c, x[ok]), "-", label=f"fit slope {c[0]:.3f}")
    ax.set_xlabel("log(1/eps)")
    ax.set_ylabel("log E N")
    ax.set_title(f"d={report.d}, alpha={report.alpha}: expected {report.expected_exponent:.3f}")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_field_slice(values: np.ndarray, path: str | Path, title: str = "") -> Path:
    """Heat map of a 2D sample, or of its middle slice for d > 2."""
    while values.ndim > 2:
        values = values[..., values.shape[-1] // 2]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(values.T, origin="lower", extent=(0, 1, 0, 1), cmap="RdBu_r")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    return _save(fig, path)
