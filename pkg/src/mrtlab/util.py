"""Shared numerics helpers: bump profiles, multilinear interpolation on
tensor-product axes, Gauss-Legendre shortcuts, deterministic file output."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# Mass of the C^2 bump profile (1 - t^2)^3 on [-1, 1].
BUMP_MASS_1D = 32.0 / 35.0


def bump(t: np.ndarray) -> np.ndarray:
    """Compactly supported polynomial bump, peak 1 at 0, zero for |t| >= 1."""
    t = np.asarray(t, dtype=float)
    s = 1.0 - t * t
    return np.where(s > 0.0, s * s * s, 0.0)


def gauss_legendre(n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


@dataclass(frozen=True)
class Axis:
    """One interpolation/quadrature axis of a tensor-product grid."""

    nodes: np.ndarray          # strictly increasing
    periodic: bool = False
    period: float = 0.0

    def __len__(self) -> int:
        return len(self.nodes)


def uniform_midpoint_axis(n: int, period: float) -> Axis:
    h = period / n
    return Axis(nodes=(np.arange(n) + 0.5) * h, periodic=True, period=period)


def _locate(axis: Axis, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interval index j and fraction f so that q sits between nodes j and j+1.

    Clamped axes extrapolate as constants beyond the end nodes; periodic
    axes wrap the final interval around the period.
    """
    nodes = axis.nodes
    k = len(nodes)
    if axis.periodic:
        q = np.mod(q - nodes[0], axis.period) + nodes[0]
        j = np.searchsorted(nodes, q, side="right") - 1
        j = np.clip(j, 0, k - 1)
        nxt = (j + 1) % k
        gap = np.where(nxt == 0, nodes[0] + axis.period - nodes[-1], nodes[nxt] - nodes[j])
        f = (q - nodes[j]) / gap
        return j, np.clip(f, 0.0, 1.0)
    j = np.searchsorted(nodes, q, side="right") - 1
    j = np.clip(j, 0, k - 2) if k > 1 else np.zeros_like(q, dtype=int)
    gap = nodes[j + 1] - nodes[j] if k > 1 else np.ones_like(q)
    f = (q - nodes[j]) / gap
    return j, np.clip(f, 0.0, 1.0)


def multilinear_weights(axes: list[Axis], coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear interpolation stencil on a tensor-product grid.

    coords has shape (N, d) matching the axis list. Returns flat node
    indices (N, 2^d) in C order over the axes and matching weights that
    sum to 1 per point.
    """
    coords = np.atleast_2d(coords)
    n, d = coords.shape
    if d != len(axes):
        raise ValueError("coordinate/axis dimension mismatch")
    sizes = [len(ax) for ax in axes]
    strides = np.ones(d, dtype=int)
    for i in range(d - 2, -1, -1):
        strides[i] = strides[i + 1] * sizes[i + 1]
    idx = np.zeros((n, 1), dtype=int)
    wgt = np.ones((n, 1))
    for i, ax in enumerate(axes):
        j, f = _locate(ax, coords[:, i])
        if len(ax) == 1:
            pair_idx = np.stack([j, j], axis=1)
            pair_w = np.stack([np.ones(n), np.zeros(n)], axis=1)
        else:
            j2 = (j + 1) % len(ax) if ax.periodic else j + 1
            pair_idx = np.stack([j, j2], axis=1)
            pair_w = np.stack([1.0 - f, f], axis=1)
        idx = (idx[:, :, None] + strides[i] * pair_idx[:, None, :]).reshape(n, -1)
        wgt = (wgt[:, :, None] * pair_w[:, None, :]).reshape(n, -1)
    return idx, wgt


def axis_hat_masses(nodes: np.ndarray, density, lo: float | None = None,
                    hi: float | None = None, nsub: int = 64) -> np.ndarray:
    """Mass-lumped weights: integral of each node's interpolation hat
    against a 1-d density, with optional clamp regions [lo, nodes[0]]
    and [nodes[-1], hi] folded into the end nodes (matching constant
    extrapolation). The weights sum exactly to the total density mass,
    and the ratio (hat mass)/(weight) is 1 by construction, which keeps
    adjoint column sums of interpolation-based operators consistent.
    """
    nodes = np.asarray(nodes, dtype=float)
    k = len(nodes)
    w = np.zeros(k)

    def seg(a, b, f0, f1, target):
        if b - a <= 0:
            return
        t = np.linspace(a, b, nsub + 1)
        rho = density(t)
        lam = (t - a) / (b - a)
        wts = np.ones(nsub + 1)
        wts[1:-1:2] = 4.0
        wts[2:-1:2] = 2.0
        wts *= (b - a) / nsub / 3.0
        w[target] += float((rho * (f0 + (f1 - f0) * lam) * wts).sum())

    for j in range(k - 1):
        a, b = nodes[j], nodes[j + 1]
        seg(a, b, 1.0, 0.0, j)
        seg(a, b, 0.0, 1.0, j + 1)
    if lo is not None and lo < nodes[0]:
        seg(lo, nodes[0], 1.0, 1.0, 0)
    if hi is not None and hi > nodes[-1]:
        seg(nodes[-1], hi, 1.0, 1.0, k - 1)
    return w


def format_float(x: float) -> str:
    return f"{x:.17g}"


def _round_floats(obj):
    if isinstance(obj, float):
        return float(format_float(obj))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(format_float(float(obj)))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    with open(path, "w") as fh:
        json.dump(_round_floats(obj), fh, sort_keys=True, indent=1)
        fh.write("\n")


def dump_csv(path, header: list[str], rows) -> None:
    """Deterministic CSV with 17-significant-digit floats."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [format_float(v) if isinstance(v, (float, np.floating)) else str(v)
                     for v in row]
            fh.write(",".join(cells) + "\n")
