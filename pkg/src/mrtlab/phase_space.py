"""Discretization of the sphere bundle SM, its boundary halves, and S^2M.

Grids are tensor products in polar/spherical coordinates with two
structural choices that keep the discrete transport operators
L1-stable:

* coordinate singularities are merged cells: the ball has a single
  center node (direction-independent in the angular chart) and every
  sphere a single node at each pole, so interpolation never scatters
  weight across an artificial coordinate seam;
* node weights are mass-lumped: each weight is the integral of the
  node's interpolation hat against the metric volume density, so the
  ratio (hat mass)/(weight) is exactly 1 and adjoint column sums of
  interpolation-based operators match their continuum values.

Weights realize dVol_g = c(x)^{n/2} dx on the ball; for a conformal
metric the fiber measure of S_xM equals the standard angular measure
(fiber weights sum to |S^{n-1}| at every x). Boundary grids carry
d_mu = |<xi, nu>_g| dSigma^{2n-2} with a grazing cutoff eps_graze;
for conformal metrics <xi, nu>_g equals the Euclidean cosine between
unit direction and normal.

The module also provides the phase-space/boundary integral identity
check (interior integral vs flow-line integrals from either boundary
half) and the mollifier families used by the extraction experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import geometry as geo
from .geometry import MagneticSystem, trace_exit
from .util import Axis, axis_hat_masses, bump, multilinear_weights, \
    uniform_midpoint_axis, _locate

__all__ = [
    "SphereBundleGrid", "BoundaryGrid", "BoundaryFlux", "ProductGrid",
    "build_sm_grid", "build_boundary_grid", "integrate_sm",
    "integrate_boundary", "santalo_check", "SantaloReport",
    "scalar_mollifier", "fiber_mollifier", "delta_family_w",
    "defining_h1", "defining_h2", "family_phi_rho", "family_chi_delta",
    "DegenerateConfigurationError",
]


class DegenerateConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# product grids with merged singular cells

@dataclass
class ProductGrid:
    """A tensor-product interpolation structure whose multi-indices map
    to node ids through a lookup table; virtual rows (the center of the
    ball, sphere poles) repeat a single node id so interpolation across
    a coordinate singularity collapses instead of scattering."""

    axes: list
    lookup: np.ndarray          # shape (len(ax0), len(ax1), ...), int node ids
    n_nodes: int

    def stencil(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coords = np.atleast_2d(coords)
        npts, d = coords.shape
        pair_idx = []
        pair_w = []
        for i, ax in enumerate(self.axes):
            j, f = _locate(ax, coords[:, i])
            if len(ax) == 1:
                pair_idx.append(np.stack([j, j], axis=1))
                pair_w.append(np.stack([np.ones(npts), np.zeros(npts)], axis=1))
            else:
                j2 = (j + 1) % len(ax) if ax.periodic else j + 1
                pair_idx.append(np.stack([j, j2], axis=1))
                pair_w.append(np.stack([1.0 - f, f], axis=1))
        p = 2 ** d
        ids = np.empty((npts, p), dtype=np.int64)
        wts = np.empty((npts, p))
        for m in range(p):
            sel = tuple(pair_idx[i][:, (m >> i) & 1] for i in range(d))
            ids[:, m] = self.lookup[sel]
            w = pair_w[0][:, m & 1].copy()
            for i in range(1, d):
                w = w * pair_w[i][:, (m >> i) & 1]
            wts[:, m] = w
        return ids, wts


def _angular_pair(theta: np.ndarray, cnt: int, offset: int):
    """Linear interpolation pair on a uniform periodic ring of cnt nodes
    at angles (m + 1/2) 2 pi / cnt, returning flat ids and weights."""
    if cnt == 1:
        ids0 = np.full(theta.shape, offset, dtype=np.int64)
        return ids0, ids0, np.ones_like(theta), np.zeros_like(theta)
    d = 2 * np.pi / cnt
    u = theta / d - 0.5
    j0 = np.floor(u).astype(np.int64)
    f = u - j0
    return (offset + np.mod(j0, cnt), offset + np.mod(j0 + 1, cnt),
            1.0 - f, f)


@dataclass
class DiskGrid:
    """Unit disk: one center node plus rings whose node counts shrink
    toward the center (near-equal arc cells). Interpolation is linear in
    radius between rings and linear in angle within each ring, so there
    is no coordinate seam at the center; weights are hat masses against
    the flat measure r dr dtheta."""

    r_nodes: np.ndarray
    ring_counts: np.ndarray
    ring_offsets: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def _side(self, ring: np.ndarray, theta: np.ndarray):
        ids0 = np.zeros(ring.shape, dtype=np.int64)
        ids1 = np.zeros(ring.shape, dtype=np.int64)
        w0 = np.ones_like(theta)
        w1 = np.zeros_like(theta)
        for rg in np.unique(ring):
            if rg < 0:
                continue   # center: id 0, weights (1, 0) already set
            m = ring == rg
            a0, a1, f0, f1 = _angular_pair(theta[m], int(self.ring_counts[rg]),
                                           int(self.ring_offsets[rg]))
            ids0[m], ids1[m], w0[m], w1[m] = a0, a1, f0, f1
        return ids0, ids1, w0, w1

    def stencil(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coords = np.atleast_2d(coords)
        r = coords[:, 0]
        theta = np.mod(coords[:, 1], 2 * np.pi)
        redges = np.concatenate([[0.0], self.r_nodes])
        j = np.clip(np.searchsorted(redges, r, side="right") - 1, 0,
                    len(redges) - 2)
        fr = np.clip((r - redges[j]) / (redges[j + 1] - redges[j]), 0.0, 1.0)
        fr = np.where(r >= self.r_nodes[-1], 1.0, fr)
        lo, hi = j - 1, j           # ring indices, -1 = center
        ids = np.empty((coords.shape[0], 4), dtype=np.int64)
        wts = np.empty((coords.shape[0], 4))
        for slot, (ring, wside) in enumerate(((lo, 1.0 - fr), (hi, fr))):
            a0, a1, f0, f1 = self._side(ring, theta)
            ids[:, 2 * slot] = a0
            ids[:, 2 * slot + 1] = a1
            wts[:, 2 * slot] = wside * f0
            wts[:, 2 * slot + 1] = wside * f1
        return ids, wts

    def neighbor_pairs(self) -> set:
        """Adjacent node pairs (angular within rings, radial between
        rings through the angularly nearest node); used by roughness
        penalties."""
        pairs = set()
        for i, cnt in enumerate(self.ring_counts):
            off = int(self.ring_offsets[i])
            for m in range(cnt):
                pairs.add((off + m, off + (m + 1) % cnt))
            if i == 0:
                for m in range(cnt):
                    pairs.add((0, off + m))
            else:
                pcnt = int(self.ring_counts[i - 1])
                poff = int(self.ring_offsets[i - 1])
                for m in range(cnt):
                    ang = (m + 0.5) * 2 * np.pi / cnt
                    pm = int(np.round(ang * pcnt / (2 * np.pi) - 0.5)) % pcnt
                    pairs.add((poff + pm, off + m))
        return {(min(a, b), max(a, b)) for a, b in pairs if a != b}


@dataclass
class SphereGrid:
    """Unit sphere: pole nodes plus latitude rows (uniform in cos) with
    per-row longitude counts shrinking toward the poles. Interpolation
    is linear in latitude between rows (poles included) and linear in
    longitude within each row."""

    lat_rows: np.ndarray
    row_counts: np.ndarray
    row_offsets: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    npole: int = 0

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def spole(self) -> int:
        return self.nodes.shape[0] - 1

    def _side(self, row: np.ndarray, lon: np.ndarray):
        ids0 = np.zeros(row.shape, dtype=np.int64)
        ids1 = np.zeros(row.shape, dtype=np.int64)
        w0 = np.ones_like(lon)
        w1 = np.zeros_like(lon)
        kk = len(self.lat_rows)
        ids0[row < 0] = self.npole
        ids1[row < 0] = self.npole
        ids0[row >= kk] = self.spole
        ids1[row >= kk] = self.spole
        for rg in np.unique(row):
            if rg < 0 or rg >= kk:
                continue
            m = row == rg
            a0, a1, f0, f1 = _angular_pair(lon[m], int(self.row_counts[rg]),
                                           int(self.row_offsets[rg]))
            ids0[m], ids1[m], w0[m], w1[m] = a0, a1, f0, f1
        return ids0, ids1, w0, w1

    def stencil(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coords = np.atleast_2d(coords)
        lat = np.clip(coords[:, 0], 0.0, np.pi)
        lon = np.mod(coords[:, 1], 2 * np.pi)
        edges = np.concatenate([[0.0], self.lat_rows, [np.pi]])
        j = np.clip(np.searchsorted(edges, lat, side="right") - 1, 0,
                    len(edges) - 2)
        fl = np.clip((lat - edges[j]) / np.maximum(edges[j + 1] - edges[j],
                                                   1e-300), 0.0, 1.0)
        lo, hi = j - 1, j           # row indices, -1 = north pole
        ids = np.empty((coords.shape[0], 4), dtype=np.int64)
        wts = np.empty((coords.shape[0], 4))
        for slot, (row, wside) in enumerate(((lo, 1.0 - fl), (hi, fl))):
            a0, a1, f0, f1 = self._side(row, lon)
            ids[:, 2 * slot] = a0
            ids[:, 2 * slot + 1] = a1
            wts[:, 2 * slot] = wside * f0
            wts[:, 2 * slot + 1] = wside * f1
        return ids, wts

    def neighbor_pairs(self) -> set:
        pairs = set()
        kk = len(self.lat_rows)
        for i, cnt in enumerate(self.row_counts):
            off = int(self.row_offsets[i])
            for m in range(cnt):
                pairs.add((off + m, off + (m + 1) % cnt))
            if i == 0:
                for m in range(cnt):
                    pairs.add((self.npole, off + m))
            else:
                pcnt = int(self.row_counts[i - 1])
                poff = int(self.row_offsets[i - 1])
                for m in range(cnt):
                    ang = (m + 0.5) * 2 * np.pi / cnt
                    pm = int(np.round(ang * pcnt / (2 * np.pi) - 0.5)) % pcnt
                    pairs.add((poff + pm, off + m))
            if i == kk - 1:
                for m in range(cnt):
                    pairs.add((off + m, self.spole))
        return {(min(a, b), max(a, b)) for a, b in pairs if a != b}


@dataclass
class BallGrid:
    """Unit ball: a center node plus spherical shells whose angular
    resolution scales with the shell radius."""

    r_nodes: np.ndarray
    shells: list
    shell_offsets: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def stencil(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        coords = np.atleast_2d(coords)
        r = coords[:, 0]
        redges = np.concatenate([[0.0], self.r_nodes])
        j = np.clip(np.searchsorted(redges, r, side="right") - 1, 0,
                    len(redges) - 2)
        fr = np.clip((r - redges[j]) / (redges[j + 1] - redges[j]), 0.0, 1.0)
        fr = np.where(r >= self.r_nodes[-1], 1.0, fr)
        n = coords.shape[0]
        ids = np.zeros((n, 8), dtype=np.int64)
        wts = np.zeros((n, 8))
        for slot, (shell, wside) in enumerate(((j - 1, 1.0 - fr), (j, fr))):
            base = 4 * slot
            wts[:, base] = wside      # center default: id 0 carries wside
            for sh in np.unique(shell):
                if sh < 0:
                    continue
                m = np.flatnonzero(shell == sh)
                sid, sw = self.shells[sh].stencil(coords[m][:, 1:])
                ids[m[:, None], base + np.arange(4)[None, :]] = \
                    sid + self.shell_offsets[sh]
                wts[m[:, None], base + np.arange(4)[None, :]] = \
                    sw * wside[m][:, None]
        return ids, wts

    def neighbor_pairs(self) -> set:
        pairs = set()
        for s, sph in enumerate(self.shells):
            off = int(self.shell_offsets[s])
            pairs |= {(a + off, b + off) for a, b in sph.neighbor_pairs()}
            if s == 0:
                for m in range(sph.n_nodes):
                    pairs.add((0, off + m))
            else:
                prev = self.shells[s - 1]
                poff = int(self.shell_offsets[s - 1])
                dirs_prev = prev.nodes
                nearest = np.argmax(sph.nodes @ dirs_prev.T, axis=1)
                for m, pm in enumerate(nearest):
                    pairs.add((poff + int(pm), off + m))
        return {(min(a, b), max(a, b)) for a, b in pairs if a != b}


def _disk_grid(nr: int, nth: int, reduce: bool = True
               ) -> tuple[DiskGrid, np.ndarray, np.ndarray]:
    dr = 1.0 / nr
    rnodes = (np.arange(nr) + 0.5) * dr
    rmass = axis_hat_masses(np.concatenate([[0.0], rnodes]), lambda r: r,
                            lo=0.0, hi=1.0)
    if reduce:
        counts = np.maximum(6, np.rint(nth * rnodes / rnodes[-1]).astype(int))
    else:
        counts = np.full(nr, nth, dtype=int)
    offsets = 1 + np.concatenate([[0], np.cumsum(counts)[:-1]])
    nodes = [np.zeros((1, 2))]
    w = [np.array([rmass[0] * 2 * np.pi])]
    for i, r in enumerate(rnodes):
        ang = (np.arange(counts[i]) + 0.5) * (2 * np.pi / counts[i])
        nodes.append(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))
        w.append(np.full(counts[i], rmass[i + 1] * 2 * np.pi / counts[i]))
    grid = DiskGrid(r_nodes=rnodes, ring_counts=counts, ring_offsets=offsets,
                    nodes=np.concatenate(nodes), weights=np.concatenate(w))
    return grid, grid.nodes, grid.weights


def _sphere_grid(nlat: int, nlon: int, scale: float = 1.0,
                 reduce: bool = True) -> tuple[SphereGrid, np.ndarray, np.ndarray]:
    krows = max(1, int(round(nlat * scale)))
    dmu = 2.0 / krows
    mu = 1.0 - (np.arange(krows) + 0.5) * dmu
    lats = np.arccos(mu)
    lmass = axis_hat_masses(np.concatenate([[0.0], lats, [np.pi]]), np.sin)
    if reduce:
        counts = np.maximum(4, np.rint(nlon * scale * np.sin(lats)).astype(int))
    else:
        counts = np.full(krows, nlon, dtype=int)
    offsets = 1 + np.concatenate([[0], np.cumsum(counts)[:-1]])
    nodes = [np.array([[0.0, 0.0, 1.0]])]
    w = [np.array([lmass[0] * 2 * np.pi])]
    for i, lat in enumerate(lats):
        ang = (np.arange(counts[i]) + 0.5) * (2 * np.pi / counts[i])
        nodes.append(np.stack([np.sin(lat) * np.cos(ang),
                               np.sin(lat) * np.sin(ang),
                               np.full(counts[i], np.cos(lat))], axis=1))
        w.append(np.full(counts[i], lmass[i + 1] * 2 * np.pi / counts[i]))
    nodes.append(np.array([[0.0, 0.0, -1.0]]))
    w.append(np.array([lmass[-1] * 2 * np.pi]))
    grid = SphereGrid(lat_rows=lats, row_counts=counts, row_offsets=offsets,
                      nodes=np.concatenate(nodes), weights=np.concatenate(w))
    return grid, grid.nodes, grid.weights


def _ball_grid(nr: int, nlat: int, nlon: int, reduce: bool = True
               ) -> tuple[BallGrid, np.ndarray, np.ndarray]:
    dr = 1.0 / nr
    rnodes = (np.arange(nr) + 0.5) * dr
    rmass = axis_hat_masses(np.concatenate([[0.0], rnodes]), lambda r: r * r,
                            lo=0.0, hi=1.0)
    shells = []
    offsets = []
    nodes = [np.zeros((1, 3))]
    w = [np.array([rmass[0] * 4 * np.pi])]
    cur = 1
    for i, r in enumerate(rnodes):
        sph, snodes, sw = _sphere_grid(nlat, nlon,
                                       scale=r / rnodes[-1] if reduce else 1.0,
                                       reduce=reduce)
        shells.append(sph)
        offsets.append(cur)
        nodes.append(r * snodes)
        w.append(rmass[i + 1] * sw)
        cur += sph.n_nodes
    grid = BallGrid(r_nodes=rnodes, shells=shells,
                    shell_offsets=np.array(offsets, dtype=np.int64),
                    nodes=np.concatenate(nodes), weights=np.concatenate(w))
    return grid, grid.nodes, grid.weights


# ---------------------------------------------------------------------------
# sphere bundle grid

@dataclass
class SphereBundleGrid:
    """Grid on SM = ball x sphere with quadrature weights (dVol_g x fiber)."""

    sys: MagneticSystem
    spatial: ProductGrid
    fiber: ProductGrid
    x: np.ndarray            # (Nx, n) spatial nodes
    wx: np.ndarray           # (Nx,) metric volume weights
    dirs: np.ndarray         # (Nd, n) Euclidean unit fiber directions
    wdir: np.ndarray         # (Nd,) fiber weights, sum = |S^{n-1}|
    label: str = ""

    @property
    def n_spatial(self) -> int:
        return self.x.shape[0]

    @property
    def n_dir(self) -> int:
        return self.dirs.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.n_spatial * self.n_dir

    def phase_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """All (x, xi) pairs, flattened C-style (spatial index major)."""
        X = np.repeat(self.x, self.n_dir, axis=0)
        c = np.repeat(self.sys.conformal(self.x), self.n_dir)
        V = np.tile(self.dirs, (self.n_spatial, 1)) / np.sqrt(c)[:, None]
        return X, V

    def phase_weights(self) -> np.ndarray:
        return (self.wx[:, None] * self.wdir[None, :]).ravel()

    def _spatial_coords(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        r = np.linalg.norm(x, axis=1)
        if self.sys.dim == 2:
            th = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
            return np.stack([r, th], axis=1)
        lat = np.arccos(np.clip(np.divide(x[:, 2], np.maximum(r, 1e-300)), -1, 1))
        lon = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
        return np.stack([r, lat, lon], axis=1)

    def _fiber_coords(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        u = v / np.linalg.norm(v, axis=1)[:, None]
        if self.sys.dim == 2:
            return np.mod(np.arctan2(u[:, 1], u[:, 0]), 2 * np.pi)[:, None]
        lat = np.arccos(np.clip(u[:, 2], -1, 1))
        lon = np.mod(np.arctan2(u[:, 1], u[:, 0]), 2 * np.pi)
        return np.stack([lat, lon], axis=1)

    def interp(self, x: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Multilinear stencil (flat phase ids, weights) at phase points."""
        ids_s, w_s = self.spatial.stencil(self._spatial_coords(x))
        ids_f, w_f = self.fiber.stencil(self._fiber_coords(v))
        ids = (ids_s[:, :, None] * self.n_dir + ids_f[:, None, :])
        w = w_s[:, :, None] * w_f[:, None, :]
        n = ids.shape[0]
        return ids.reshape(n, -1), w.reshape(n, -1)

    def interp_values(self, values: np.ndarray, x: np.ndarray,
                      v: np.ndarray) -> np.ndarray:
        ids, w = self.interp(x, v)
        return (values.ravel()[ids] * w).sum(axis=1)

    def export(self) -> dict:
        return {
            "dim": self.sys.dim,
            "spatial_nodes": self.x.tolist(),
            "spatial_weights": self.wx.tolist(),
            "fiber_dirs": self.dirs.tolist(),
            "fiber_weights": self.wdir.tolist(),
            "label": self.label,
        }


def build_sm_grid(sys: MagneticSystem, spatial: tuple, fiber: tuple,
                  label: str = "") -> SphereBundleGrid:
    """spatial = (nr, ntheta) or (nr, nlat, nlon); fiber = (nbeta,) or
    (nlat, nlon)."""
    if sys.dim == 2:
        sgrid, x, wflat = _disk_grid(*spatial)
        nb = fiber[0]
        beta_ax = uniform_midpoint_axis(nb, 2 * np.pi)
        dirs = np.stack([np.cos(beta_ax.nodes), np.sin(beta_ax.nodes)], axis=1)
        wdir = np.full(nb, 2 * np.pi / nb)
        fgrid = ProductGrid(axes=[beta_ax],
                            lookup=np.arange(nb, dtype=np.int64), n_nodes=nb)
        wx = wflat * sys.conformal(x)
    else:
        sgrid, x, wflat = _ball_grid(*spatial)
        fgrid, dirs, wdir = _sphere_grid(*fiber)
        wx = wflat * sys.conformal(x) ** 1.5
    return SphereBundleGrid(sys=sys, spatial=sgrid, fiber=fgrid, x=x, wx=wx,
                            dirs=dirs, wdir=wdir, label=label)


# ---------------------------------------------------------------------------
# boundary grids

@dataclass
class BoundaryGrid:
    """Nodes of the incoming (+) or outgoing (-) boundary sphere bundle."""

    sys: MagneticSystem
    side: str                 # "+" incoming, "-" outgoing
    pos: np.ndarray           # (Nb, n) boundary points (unit sphere)
    pos_w: np.ndarray         # (Nb,) boundary area weights (metric)
    dirs: np.ndarray          # (Nb, Ndir, n) unit direction vectors
    dir_cos: np.ndarray       # (Ndir,) |<xi, nu>| of the direction nodes
    dir_w: np.ndarray         # (Ndir,) direction weights incl. cosine factor
    pos_grid: ProductGrid
    dir_grid: ProductGrid
    eps_graze: float
    label: str = ""

    @property
    def n_pos(self) -> int:
        return self.pos.shape[0]

    @property
    def n_dir(self) -> int:
        return self.dirs.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.n_pos * self.n_dir

    @property
    def mu_w(self) -> np.ndarray:
        return self.pos_w[:, None] * self.dir_w[None, :]

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.repeat(self.pos, self.n_dir, axis=0)
        c = np.repeat(self.sys.conformal(self.pos), self.n_dir)
        V = self.dirs.reshape(-1, self.sys.dim) / np.sqrt(c)[:, None]
        return X, V

    def total_mass(self) -> float:
        return float(self.mu_w.sum())

    def _coords(self, x: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        v = np.atleast_2d(v)
        u = v / np.linalg.norm(v, axis=1)[:, None]
        xhat = x / np.linalg.norm(x, axis=1)[:, None]
        inward = -xhat if self.side == "+" else xhat
        if self.sys.dim == 2:
            phi = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
            tang = np.stack([-xhat[:, 1], xhat[:, 0]], axis=1)
            theta = np.arctan2((u * tang).sum(1), (u * inward).sum(1))
            return phi[:, None], theta[:, None]
        lat = np.arccos(np.clip(xhat[:, 2], -1, 1))
        lon = np.mod(np.arctan2(xhat[:, 1], xhat[:, 0]), 2 * np.pi)
        e1 = np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon),
                       -np.sin(lat)], axis=1)
        e2 = np.stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)], axis=1)
        th = np.arccos(np.clip((u * inward).sum(1), -1, 1))
        psi = np.mod(np.arctan2((u * e2).sum(1), (u * e1).sum(1)), 2 * np.pi)
        return np.stack([lat, lon], axis=1), np.stack([th, psi], axis=1)

    def interp(self, x: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pc, dc = self._coords(x, v)
        ids_p, w_p = self.pos_grid.stencil(pc)
        ids_d, w_d = self.dir_grid.stencil(dc)
        ids = ids_p[:, :, None] * self.n_dir + ids_d[:, None, :]
        w = w_p[:, :, None] * w_d[:, None, :]
        n = ids.shape[0]
        return ids.reshape(n, -1), w.reshape(n, -1)

    def export(self) -> dict:
        return {
            "dim": self.sys.dim, "side": self.side,
            "positions": self.pos.tolist(), "position_weights": self.pos_w.tolist(),
            "mu_weights": self.mu_w.tolist(), "eps_graze": self.eps_graze,
            "label": self.label,
        }


def build_boundary_grid(sys: MagneticSystem, side: str, positions: tuple,
                        directions: tuple, eps_graze: float = 1e-3,
                        label: str = "") -> BoundaryGrid:
    """positions = (nphi,) or (nlat, nlon); directions = (ntheta,) or
    (ntheta, npsi) measured from the (side-dependent) normal. Weights
    are mass-lumped in every non-periodic axis."""
    if side not in "+-":
        raise ValueError("side must be '+' or '-'")
    if sys.dim == 2:
        (nphi,) = positions
        phi_ax = uniform_midpoint_axis(nphi, 2 * np.pi)
        pos = np.stack([np.cos(phi_ax.nodes), np.sin(phi_ax.nodes)], axis=1)
        pos_w = np.sqrt(sys.conformal(pos)) * (2 * np.pi / nphi)
        pos_grid = ProductGrid(axes=[phi_ax],
                               lookup=np.arange(nphi, dtype=np.int64),
                               n_nodes=nphi)
        (nth,) = directions
        theta_max = np.arccos(eps_graze)
        dth = 2.0 * theta_max / nth
        th = -theta_max + (np.arange(nth) + 0.5) * dth
        wth = axis_hat_masses(th, np.cos, lo=-theta_max, hi=theta_max)
        xhat = pos
        inward = -xhat if side == "+" else xhat
        tang = np.stack([-xhat[:, 1], xhat[:, 0]], axis=1)
        dirs = (np.cos(th)[None, :, None] * inward[:, None, :]
                + np.sin(th)[None, :, None] * tang[:, None, :])
        dir_cos = np.cos(th)
        dir_grid = ProductGrid(axes=[Axis(nodes=th)],
                               lookup=np.arange(nth, dtype=np.int64),
                               n_nodes=nth)
        dir_w = wth
    else:
        nlat, nlon = positions
        pos_sph, pos, psw = _sphere_grid(nlat, nlon)
        pos_w = psw * sys.conformal(pos)
        pos_grid = pos_sph
        nth, npsi = directions
        theta_max = np.arccos(eps_graze)
        dth = theta_max / nth
        th = (np.arange(nth) + 0.5) * dth
        wth = axis_hat_masses(th, lambda t: np.cos(t) * np.sin(t),
                              lo=0.0, hi=theta_max)
        psi_ax = uniform_midpoint_axis(npsi, 2 * np.pi)
        xhat = pos
        inward = -xhat if side == "+" else xhat
        lat_v = np.arccos(np.clip(xhat[:, 2], -1, 1))
        lon_v = np.arctan2(xhat[:, 1], xhat[:, 0])
        e1 = np.stack([np.cos(lat_v) * np.cos(lon_v), np.cos(lat_v) * np.sin(lon_v),
                       -np.sin(lat_v)], axis=1)
        e2 = np.stack([-np.sin(lon_v), np.cos(lon_v), np.zeros_like(lon_v)], axis=1)
        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(psi_ax.nodes), np.sin(psi_ax.nodes)
        dirs = (ct[None, :, None, None] * inward[:, None, None, :]
                + st[None, :, None, None] * (cp[None, None, :, None] * e1[:, None, None, :]
                                             + sp[None, None, :, None] * e2[:, None, None, :]))
        dirs = dirs.reshape(pos.shape[0], nth * npsi, 3)
        dir_w = (wth[:, None] * np.full(npsi, 2 * np.pi / npsi)[None, :]).ravel()
        dir_cos = np.repeat(ct, npsi)
        th_axis = Axis(nodes=th)
        lookup = np.arange(nth * npsi, dtype=np.int64).reshape(nth, npsi)
        dir_grid = ProductGrid(axes=[th_axis, psi_ax], lookup=lookup,
                               n_nodes=nth * npsi)
    return BoundaryGrid(sys=sys, side=side, pos=pos, pos_w=pos_w, dirs=dirs,
                        dir_cos=dir_cos, dir_w=dir_w, pos_grid=pos_grid,
                        dir_grid=dir_grid, eps_graze=eps_graze, label=label)


@dataclass
class BoundaryFlux:
    """A discrete function on a boundary grid (values at nodes)."""

    grid: BoundaryGrid
    values: np.ndarray        # (Nb, Ndir)

    def l1_norm(self) -> float:
        return float((self.grid.mu_w * np.abs(self.values)).sum())

    def mass(self) -> float:
        return float((self.grid.mu_w * self.values).sum())

    @classmethod
    def from_callable(cls, grid: BoundaryGrid, f: Callable) -> "BoundaryFlux":
        X, V = grid.nodes()
        vals = np.asarray(f(X, V), dtype=float).reshape(grid.n_pos, grid.n_dir)
        return cls(grid=grid, values=vals)

    def interp_at(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        idx, w = self.grid.interp(x, v)
        return (self.values.ravel()[idx] * w).sum(axis=1)


# ---------------------------------------------------------------------------
# quadrature and the phase-space/boundary identity

def integrate_sm(grid: SphereBundleGrid, f) -> float:
    """Integral over SM of f(x, xi) (callable or (Nx, Nd) array)."""
    if callable(f):
        X, V = grid.phase_nodes()
        vals = np.asarray(f(X, V), dtype=float)
    else:
        vals = np.asarray(f, dtype=float).ravel()
    return float((grid.phase_weights() * vals).sum())


def integrate_boundary(bgrid: BoundaryGrid, f) -> float:
    """Integral over the boundary half against d_mu."""
    if callable(f):
        X, V = bgrid.nodes()
        vals = np.asarray(f(X, V), dtype=float).reshape(bgrid.n_pos, bgrid.n_dir)
    elif isinstance(f, BoundaryFlux):
        vals = f.values
    else:
        vals = np.asarray(f, dtype=float).reshape(bgrid.n_pos, bgrid.n_dir)
    return float((bgrid.mu_w * vals).sum())


@dataclass
class SantaloReport:
    lhs: float
    rhs_plus: float
    rhs_minus: float

    @property
    def discrepancies(self) -> dict:
        scale = max(abs(self.lhs), abs(self.rhs_plus), abs(self.rhs_minus), 1e-300)
        return {
            "lhs_vs_plus": abs(self.lhs - self.rhs_plus) / scale,
            "lhs_vs_minus": abs(self.lhs - self.rhs_minus) / scale,
            "plus_vs_minus": abs(self.rhs_plus - self.rhs_minus) / scale,
        }


def _flow_line_integral(sys: MagneticSystem, bgrid: BoundaryGrid, f,
                        quad_step: float) -> float:
    """Sum over boundary nodes of mu_w * int f along the inward flow."""
    X, V = bgrid.nodes()
    tdir = 1 if bgrid.side == "+" else -1
    sw = trace_exit(sys, X, V, tdir=tdir, quad_step=quad_step)
    if np.any(sw.trapped):
        raise geo.SimplicityError("trapped trajectory in boundary sweep")
    k = sw.ts.shape[1]
    vals = np.zeros_like(sw.ts)
    mask = np.arange(k)[None, :] < sw.counts[:, None]
    vals[mask] = f(sw.xs[mask], sw.vs[mask])
    seg = np.diff(sw.ts, axis=1)
    seg = np.where(np.arange(1, k)[None, :] < sw.counts[:, None], seg, 0.0)
    line = 0.5 * (seg * (vals[:, 1:] + vals[:, :-1])).sum(axis=1)
    return float((bgrid.mu_w.ravel() * line).sum())


def santalo_check(sys: MagneticSystem, grid: SphereBundleGrid,
                  bplus: BoundaryGrid, bminus: BoundaryGrid, f,
                  quad_step: float = 0.01) -> SantaloReport:
    """Compare the SM integral of f with the two boundary flow integrals."""
    lhs = integrate_sm(grid, f)
    rhs_p = _flow_line_integral(sys, bplus, f, quad_step)
    rhs_m = _flow_line_integral(sys, bminus, f, quad_step)
    return SantaloReport(lhs=lhs, rhs_plus=rhs_p, rhs_minus=rhs_m)


# ---------------------------------------------------------------------------
# mollifier families

def scalar_mollifier(eps: float) -> Callable:
    """psi_eps(l) = bump(l / eps): peak 1 at l = 0, support |l| < eps.
    Used where the extraction limit needs the peak value, not unit mass."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return lambda l: bump(np.asarray(l) / eps)


def fiber_mollifier(sys: MagneticSystem, eps: float, dim: Optional[int] = None):
    """Unit-mass mollifier of the geodesic angle on a fiber sphere.

    Returns psi(angle) with integral 1 against the fiber measure (the
    standard angular measure for conformal metrics).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = dim or sys.dim
    if n == 2:
        mass = 2.0 * eps * (16.0 / 35.0)
    else:
        tt = np.linspace(0.0, min(eps, np.pi), 2001)
        mass = 2 * np.pi * np.trapezoid(bump(tt / eps) * np.sin(tt), tt)

    def psi(angle: np.ndarray) -> np.ndarray:
        return bump(np.asarray(angle) / eps) / mass

    return psi


def delta_family_w(bgrid: BoundaryGrid, eps: float,
                   center_node: tuple[int, int]) -> BoundaryFlux:
    """Approximate-identity flux on the incoming boundary: a product bump
    in the boundary chart around the center node, divided by the cosine
    factor and normalized to unit L1(d_mu) mass on the grid."""
    ip, idir = center_node
    X, V = bgrid.nodes()
    pc, dc = bgrid._coords(X, V)
    coords = np.concatenate([pc, dc], axis=1).reshape(bgrid.n_pos, bgrid.n_dir, -1)
    c0 = coords[ip, idir]
    prof = np.ones((bgrid.n_pos, bgrid.n_dir))
    axes = bgrid.pos_grid.axes + bgrid.dir_grid.axes
    for axis_i, ax in enumerate(axes):
        d = coords[..., axis_i] - c0[axis_i]
        if ax.periodic:
            d = np.mod(d + np.pi, 2 * np.pi) - np.pi
        prof *= bump(d / eps)
    cosfac = np.abs(np.tile(bgrid.dir_cos[None, :], (bgrid.n_pos, 1)))
    vals = prof / np.maximum(cosfac, bgrid.eps_graze)
    mass = (bgrid.mu_w * vals).sum()
    if mass <= 0:
        raise ValueError("mollifier support misses the grid; increase eps")
    return BoundaryFlux(grid=bgrid, values=vals / mass)


def _arrival_direction(sys: MagneticSystem, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unit direction at y of the magnetic geodesic issued from z through y."""
    w = geo.magnetic_exp_inverse(sys, z, y)
    t = float(sys.metric_norm(z, w)[0])
    if t < 1e-12:
        raise DegenerateConfigurationError("coincident points")
    _, v = geo.flow(sys, z, w / t, t)
    return v[0]


def defining_h1(sys: MagneticSystem, y: np.ndarray, eta: np.ndarray,
                eta_p: np.ndarray) -> Callable:
    """Defining function of the boundary set swept by geodesics through y
    with directions in span{eta, eta'}: h1(z) is the metric norm of the
    projection of the arrival direction at y onto the orthogonal
    complement of the span. h1(z) = 0 exactly on that set."""
    y = np.asarray(y, dtype=float)
    span = _span_basis(eta, eta_p)
    c_y = float(sys.conformal(np.atleast_2d(y))[0])

    def h1(zs: np.ndarray) -> np.ndarray:
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        out = np.empty(zs.shape[0])
        for i, z in enumerate(zs):
            v = _arrival_direction(sys, z, y)
            perp = v - span @ (span.T @ v)
            out[i] = np.sqrt(c_y * (perp * perp).sum())
        return out

    return h1


def _span_basis(eta, eta_p) -> np.ndarray:
    """Euclidean-orthonormal basis of span{eta, eta'} (columns)."""
    e1 = np.asarray(eta, dtype=float)
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.asarray(eta_p, dtype=float)
    e2 = e2 - (e2 @ e1) * e1
    n2 = np.linalg.norm(e2)
    if n2 < 1e-10:
        raise DegenerateConfigurationError(
            "eta and eta' are linearly dependent; configuration degenerate")
    return np.stack([e1, e2 / n2], axis=1)


@dataclass
class H2Family:
    """The transverse defining function for the scattering extraction.

    x_star is the backward exit of (y, eta'); eta_star = dh/ds at 0 for
    h(s) = backward exit of (y(s), b(s)) with y(s) the eta-geodesic and
    b(s) the parallel transport of eta' along it (computed by central
    finite differences). h2(x') = <exp_{x*}^{-1}(x'), eta*>_g vanishes
    exactly at x* and grows linearly along the curve h(s).
    """

    sys: MagneticSystem
    x_star: np.ndarray
    eta_star: np.ndarray
    norm2: float              # |eta*|_g^2

    def __call__(self, xp: np.ndarray) -> np.ndarray:
        xp = np.atleast_2d(np.asarray(xp, dtype=float))
        c = float(self.sys.conformal(np.atleast_2d(self.x_star))[0])
        out = np.empty(xp.shape[0])
        for i, z in enumerate(xp):
            w = geo.magnetic_exp_inverse(self.sys, self.x_star, z) if \
                np.linalg.norm(z - self.x_star) > 1e-12 else np.zeros_like(z)
            out[i] = c * float(w @ self.eta_star)
        return out

    def linearized(self, xp: np.ndarray) -> np.ndarray:
        """Chart-linearized h2 (error O(|x' - x*|^2)); used in hot loops."""
        xp = np.atleast_2d(np.asarray(xp, dtype=float))
        c = float(self.sys.conformal(np.atleast_2d(self.x_star))[0])
        return c * ((xp - self.x_star[None, :]) @ self.eta_star)


def defining_h2(sys: MagneticSystem, y: np.ndarray, eta: np.ndarray,
                eta_p: np.ndarray, fd_step: float = 2e-3) -> H2Family:
    y = np.asarray(y, dtype=float)
    _span_basis(eta, eta_p)   # raises on degenerate input

    def exit_point(s: float) -> np.ndarray:
        if abs(s) < 1e-15:
            xz = np.atleast_2d(y)
            b = np.atleast_2d(eta_p)
        else:
            xz, _ = geo.flow(sys, y, eta, s)
            b = geo.transport_along(sys, y, eta, eta_p, s)
        b = sys.unit(xz, b)
        sw = trace_exit(sys, xz, b, tdir=-1)
        return sw.exit_x[0]

    x_star = exit_point(0.0)
    eta_star = (exit_point(fd_step) - exit_point(-fd_step)) / (2 * fd_step)
    c_star = float(sys.conformal(np.atleast_2d(x_star))[0])
    norm2 = c_star * float(eta_star @ eta_star)
    if norm2 < 1e-12:
        raise DegenerateConfigurationError("eta* vanishes; configuration degenerate")
    return H2Family(sys=sys, x_star=x_star, eta_star=eta_star, norm2=norm2)


def family_phi_rho(rho: float, h1: Callable) -> Callable:
    """phi_rho(z) = bump(h1(z) / rho): peak 1 on the defining set."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    return lambda z: bump(np.asarray(h1(z)) / rho)


def family_chi_delta(delta: float, h2: Callable, norm2: float) -> Callable:
    """chi_delta(x') = (1/delta) chi(h2(x') / delta) with mass
    int chi = |eta*|_g^2, the normalization the extraction limit needs
    to cancel the h2 change of variables."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    from .util import BUMP_MASS_1D
    scale = norm2 / BUMP_MASS_1D

    def chi(xp):
        return scale / delta * bump(np.asarray(h2(xp)) / delta)

    return chi
