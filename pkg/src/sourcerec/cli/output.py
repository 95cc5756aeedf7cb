"""Deterministic CSV and SVG writers."""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np

FLOAT_FMT = ".10g"


def write_csv(path, header, columns):
    """Write equal-length columns under ``header``; floats use a fixed format."""
    path = Path(path)
    cols = [np.asarray(c) for c in columns]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    text_cols = []
    for c in cols:
        if c.dtype.kind in "iub":
            text_cols.append([str(int(x)) for x in c])
        elif c.dtype.kind == "f":
            text_cols.append([format(float(x), FLOAT_FMT) for x in c])
        else:
            text_cols.append([str(x) for x in c])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(zip(*text_cols))
    return path


def read_csv(path):
    """Header and float columns (by name) of a numeric CSV."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------
# plots

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sourcerec"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    _pyplot().close(fig)
    return Path(path)


def plot_profile(path, x, panels, title=None):
    """Stacked 1-D panels.  Each panel is ``(label, mean, sd, truth, samples)``
    where any of ``sd``, ``truth`` and ``samples`` may be None."""
    plt = _pyplot()
    fig, axes = plt.subplots(len(panels), 1, figsize=(7, 2.6 * len(panels)), sharex=True, squeeze=False)
    for ax, (label, mean, sd, truth, samples) in zip(axes[:, 0], panels):
        if samples is not None:
            for j in range(samples.shape[1]):
                ax.plot(x, samples[:, j], color="0.7", lw=0.6)
        if sd is not None:
            ax.fill_between(x, mean - 2 * sd, mean + 2 * sd, color="tab:blue", alpha=0.2, lw=0)
        ax.plot(x, mean, color="tab:blue", lw=1.2, label="posterior mean")
        if truth is not None:
            ax.plot(x, truth, color="k", lw=1.0, ls="--", label="truth")
        ax.set_ylabel(label)
    axes[0, 0].legend(loc="best", fontsize=8)
    axes[-1, 0].set_xlabel("s")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    return save_svg(fig, path)


def plot_field_2d(path, mesh, fields):
    """Side-by-side triangle-shaded nodal fields ``[(label, values), ...]``."""
    plt = _pyplot()
    from matplotlib.tri import Triangulation

    tri = Triangulation(mesh.coords[:, 0], mesh.coords[:, 1], mesh.cells)
    fig, axes = plt.subplots(1, len(fields), figsize=(4.5 * len(fields), 3.6), squeeze=False)
    for ax, (label, vals) in zip(axes[0], fields):
        pc = ax.tripcolor(tri, vals, shading="gouraud", rasterized=False)
        fig.colorbar(pc, ax=ax)
        ax.set_title(label)
        ax.set_aspect("equal")
    fig.tight_layout()
    return save_svg(fig, path)


def plot_heatmaps(path, x, t, grids, markers=None):
    """Space-time heatmaps (time on the vertical axis)."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(grids), figsize=(4.5 * len(grids), 4.2), squeeze=False)
    extent = (x[0], x[-1], t[0], t[-1])
    for ax, (label, G) in zip(axes[0], grids):
        im = ax.imshow(G, origin="lower", aspect="auto", extent=extent, interpolation="nearest")
        fig.colorbar(im, ax=ax)
        if markers is not None:
            ax.plot(markers[0], markers[1], "r.", ms=2)
        ax.set_title(label)
        ax.set_xlabel("s")
    axes[0, 0].set_ylabel("t")
    fig.tight_layout()
    return save_svg(fig, path)


def plot_histograms(path, samples, priors):
    """Posterior sample histograms with the prior density overlaid."""
    plt = _pyplot()
    names = list(samples)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 2.8), squeeze=False)
    for ax, k in zip(axes[0], names):
        s = samples[k]
        pr = priors[k]
        if pr.fixed:
            ax.axvline(pr.value, color="k")
        else:
            ax.hist(s, bins=30, density=True, color="tab:blue", alpha=0.6)
            lo, hi = pr.interval(0.99)
            lo, hi = min(lo, s.min()), max(hi, s.max())
            grid = np.linspace(lo, hi, 200)
            ax.plot(grid, np.exp([pr.logpdf(g) for g in grid]), color="k", lw=1)
        ax.set_title(k)
    fig.tight_layout()
    return save_svg(fig, path)


def plot_error_curve(path, curve):
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, which in zip(axes, ("u", "f")):
        ax.loglog(curve.sizes, getattr(curve, "empirical_" + which), "o", ms=3, label="empirical")
        ax.loglog(curve.sizes, getattr(curve, "approx_" + which), "-", label="trace approximation")
        ax.set_xlabel("N")
        ax.set_ylabel(f"L2 error of {which}")
        ax.legend(fontsize=8)
    fig.tight_layout()
    return save_svg(fig, path)
