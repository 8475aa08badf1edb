"""Matplotlib figure rendering for the CLI report path.

Every command writes its figures next to the delimited output; these
helpers keep the styling in one place. The Agg backend is forced so
runs work headless.
"""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

DPI = 130


def _save(fig, path):
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)


def plot_trace(path_t, path_x, sys_dim, out_path):
    fig, ax = plt.subplots(figsize=(5, 5))
    th = np.linspace(0, 2 * np.pi, 256)
    ax.plot(np.cos(th), np.sin(th), "k-", lw=0.8)
    ax.plot(path_x[:, 0], path_x[:, 1], "-", color="tab:blue", lw=1.2)
    ax.plot(path_x[0, 0], path_x[0, 1], "o", color="tab:green", ms=5)
    ax.plot(path_x[-1, 0], path_x[-1, 1], "s", color="tab:red", ms=5)
    ax.set_aspect("equal")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_title("magnetic geodesic (chart projection)" if sys_dim == 3
                 else "magnetic geodesic")
    _save(fig, out_path)


def plot_santalo(rows, out_path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [r["integrand"] for r in rows]
    disc = [max(r["discrepancies"].values()) for r in rows]
    ax.bar(range(len(rows)), disc, color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, rotation=20, fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("max relative discrepancy")
    ax.set_title("phase-space vs boundary flow integrals")
    _save(fig, out_path)


def plot_field2d(grid, values, out_path, title="fiber-averaged density"):
    vals = np.asarray(values).reshape(grid.n_spatial, grid.n_dir)
    dens = (vals * grid.wdir[None, :]).sum(axis=1) / grid.wdir.sum()
    fig, ax = plt.subplots(figsize=(5, 4.2))
    sc = ax.scatter(grid.x[:, 0], grid.x[:, 1], c=dens, s=120, cmap="viridis")
    ax.set_aspect("equal")
    fig.colorbar(sc, ax=ax, shrink=0.85)
    ax.set_title(title)
    _save(fig, out_path)


def plot_matrix(mat, out_path, title="albedo matrix"):
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(mat, aspect="auto", cmap="magma", interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_xlabel("incoming node")
    ax.set_ylabel("outgoing node")
    ax.set_title(title)
    _save(fig, out_path)


def plot_columns(col_norms, out_path, title="residual column norms"):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(col_norms, lw=0.8)
    ax.set_xlabel("incoming node")
    ax.set_ylabel("L1 column norm / node mass")
    ax.set_title(title)
    _save(fig, out_path)


def plot_recovery2d(x, truth, recovered, out_path):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, vals, title in zip(axes, [truth, recovered, recovered - truth],
                               ["ground truth", "recovered", "difference"]):
        sc = ax.scatter(x[:, 0], x[:, 1], c=vals, s=70, cmap="viridis")
        ax.set_aspect("equal")
        ax.set_title(title)
        fig.colorbar(sc, ax=ax, shrink=0.8)
    _save(fig, out_path)


def plot_ray_transform(values, truth, out_path):
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(truth, lw=0.8, label="direct line integrals")
    ax.plot(values, lw=0.8, ls="--", label="extracted")
    ax.set_xlabel("outgoing node")
    ax.set_ylabel("ray transform")
    ax.legend(fontsize=8)
    _save(fig, out_path)


def plot_gauge(x, logw, out_path):
    fig, ax = plt.subplots(figsize=(5, 4.2))
    sc = ax.scatter(x[:, 0], x[:, 1], c=logw, s=100, cmap="coolwarm")
    ax.set_aspect("equal")
    fig.colorbar(sc, ax=ax, shrink=0.85)
    ax.set_title("log of the gauge weight (fiber average)")
    _save(fig, out_path)


def plot_stability(rows, out_path):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    eps = [r["eps"] for r in rows]
    ax.loglog(eps, [r["a_dist"] for r in rows], "o-", label="|a' - a~|_inf")
    ax.loglog(eps, [r["k_dist"] for r in rows], "s-", label="|k' - k~|_1")
    ax.loglog(eps, [r["a_bound"] for r in rows], "k--", label="C eps")
    ax.set_xlabel("eps = |A - A~|")
    ax.legend(fontsize=8)
    ax.set_title("stability sweep")
    _save(fig, out_path)
