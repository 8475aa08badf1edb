"""Forward transport: admissible pairs, attenuation, the integral
operators of the stationary problem, and the two solver regimes.

The boundary value problem

    -G u - a u + int_{S_xM} k(x, xi', xi) u(x, xi') dsigma(xi') = 0,
    u = u_plus on the incoming boundary,

(G the generator of the magnetic flow) is reduced to the integral
equation (Id + K) u = J u_plus, where

    J u_plus (x, xi)   = E(x, xi, tau_-, 0) u_plus(phi_{tau_-}(x, xi)),
    T0inv f (x, xi)    = - int_{tau_-}^0 E(x, xi, t, 0) f(phi_t) dt,
    T1 u (x, xi)       = int k(x, xi', xi) u(x, xi') dsigma(xi'),
    K                  = T0inv T1,
    E(x, xi, s, t)     = exp(- int_s^t a(phi_p(x, xi)) dp).

Discretely, every phase-grid node is traced backward once per geometry
(a Workspace caches these sweeps; they are reused across coefficient
pairs), and the operators become matrices: T0inv a sparse row-per-node
quadrature with attenuation factors, T1 a block-diagonal fiber
quadrature, K their product (assembled densely for the direct solver).
The Neumann mode sums (-K)^j J u_plus; since -K is positivity
preserving, both regimes propagate nonnegative boundary data to
nonnegative solutions.

Well-posedness is gated on the two subcritical conditions:
sup tau*sigma_p < 1 (Neumann contraction) or a >= sigma_p (direct
regime, where Id - Tinv T1 inverts Id + K).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import geometry as geo
from .geometry import MagneticSystem, trace_exit
from .phase_space import BoundaryFlux, BoundaryGrid, SphereBundleGrid

__all__ = [
    "AdmissiblePair", "SubcriticalReport", "PhaseField", "SubcriticalError",
    "Workspace", "TransportContext", "attenuation_E", "check_subcritical",
    "apply_J", "apply_T0_inv", "apply_T1", "apply_K", "solve_forward",
    "estimate_T1T0inv_norm",
]


class SubcriticalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# coefficients

@dataclass
class AdmissiblePair:
    """Attenuation a(x, xi) >= 0 and scattering kernel k(x, eta, xi) >= 0.

    Both are callables on batched arrays; directions are metric-unit.
    Coefficients must vanish within support_margin of the boundary
    (|x| > 1 - support_margin); this stands in for the extension to a
    larger manifold and keeps the shortest chord through the support
    bounded away from zero.
    """

    a: Callable
    k: Optional[Callable] = None
    support_margin: float = 0.1
    label: str = "pair"

    def __post_init__(self):
        if self.support_margin < 0 or self.support_margin >= 1:
            raise ValueError("support margin must lie in [0, 1)")

    @property
    def support_radius(self) -> float:
        return 1.0 - self.support_margin

    def a_values(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return np.asarray(self.a(x, xi), dtype=float)

    def k_values(self, x: np.ndarray, eta: np.ndarray, xi: np.ndarray) -> np.ndarray:
        if self.k is None:
            return np.zeros(np.atleast_2d(x).shape[0])
        return np.asarray(self.k(x, eta, xi), dtype=float)

    def validate(self, grid: SphereBundleGrid, strict: bool = True) -> None:
        """Admissibility spot checks on the grid: nonnegativity, finite
        sigma_p, and vanishing outside the support radius."""
        X, V = grid.phase_nodes()
        av = self.a_values(X, V)
        if not np.all(np.isfinite(av)):
            raise ValueError("attenuation not finite on grid")
        if strict and av.min() < -1e-12:
            raise ValueError("attenuation must be nonnegative")
        out = np.linalg.norm(X, axis=1) > self.support_radius + 1e-9
        if np.any(np.abs(av[out]) > 1e-10):
            raise ValueError("attenuation does not vanish within the support margin")

    def hash_key(self) -> str:
        return f"{self.label}:m{self.support_margin:g}"


def constant_pair(a0: float, kappa0: float = 0.0, support_margin: float = 0.1,
                  label: Optional[str] = None) -> AdmissiblePair:
    """Isotropic constants on the support ball (sharp cutoff)."""
    rad = 1.0 - support_margin

    def a(x, xi):
        x = np.atleast_2d(x)
        return a0 * (np.linalg.norm(x, axis=1) <= rad)

    k = None
    if kappa0 != 0.0:
        def k(x, eta, xi):
            x = np.atleast_2d(x)
            return kappa0 * (np.linalg.norm(x, axis=1) <= rad)

    return AdmissiblePair(a=a, k=k, support_margin=support_margin,
                          label=label or f"const_a{a0:g}_k{kappa0:g}")


@dataclass
class SubcriticalReport:
    sup_tau_sigma: float
    min_gap: float
    cond1: bool
    cond2: bool
    c0: float
    diam_mu: float

    def any_condition(self) -> bool:
        return self.cond1 or self.cond2

    def as_dict(self) -> dict:
        return {
            "sup_tau_sigma_p": self.sup_tau_sigma, "min_gap": self.min_gap,
            "cond1": bool(self.cond1), "cond2": bool(self.cond2),
            "c0": self.c0, "diam_mu": self.diam_mu,
        }


@dataclass
class PhaseField:
    """Function values on a sphere-bundle grid, shape (Nx, Nd)."""

    grid: SphereBundleGrid
    values: np.ndarray

    def copy(self) -> "PhaseField":
        return PhaseField(self.grid, np.array(self.values))

    def l1_norm(self) -> float:
        return float((self.grid.phase_weights() * np.abs(self.values).ravel()).sum())


# ---------------------------------------------------------------------------
# attenuation along traced geodesics

def attenuation_E(sys: MagneticSystem, pair: AdmissiblePair, p: geo.PhasePoint,
                  s: float, t: float, substep: float = 1e-3) -> float:
    """E(p, s, t) = exp(-int_s^t a(phi_u(p)) du) by composite Simpson along
    the traced geodesic. Requires [s, t] within the chord of p."""
    if t < s:
        raise ValueError("need s <= t")
    tm, tp = geo.exit_times(sys, p)
    if s < tm - 1e-8 or t > tp + 1e-8:
        raise ValueError("attenuation interval outside the trajectory")
    # clamp just inside the chord so marching never crosses the boundary
    s = max(s, tm + 1e-9)
    t = min(t, tp - 1e-9)
    if t - s < 1e-14:
        return 1.0
    nseg = max(2, int(np.ceil((t - s) / substep)))
    if nseg % 2:
        nseg += 1
    times = s + (t - s) * np.arange(nseg + 1) / nseg
    x, v = geo.flow(sys, p.x, p.xi, s) if abs(s) > 1e-15 else \
        (np.atleast_2d(p.x), np.atleast_2d(p.xi))
    h = (t - s) / nseg
    avals = np.empty(nseg + 1)
    avals[0] = pair.a_values(x, v)[0]
    for i in range(1, nseg + 1):
        x, v = geo._rk4_step(sys, x, v, h)
        v = geo._renorm(sys, x, v)
        avals[i] = pair.a_values(x, v)[0]
    integral = h / 3.0 * (avals[0] + avals[-1] + 4 * avals[1:-1:2].sum()
                          + 2 * avals[2:-1:2].sum())
    del times
    return float(np.exp(-integral))


# ---------------------------------------------------------------------------
# geometry workspace (pair independent, cached)

def _quad_weights(ts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Trapezoid weights along each padded sample row."""
    n, k = ts.shape
    seg = np.diff(ts, axis=1)
    valid = np.arange(1, k)[None, :] < counts[:, None]
    seg = np.where(valid, seg, 0.0)
    qw = np.zeros_like(ts)
    qw[:, :-1] += 0.5 * seg
    qw[:, 1:] += 0.5 * seg
    return qw


class _Sweep:
    """A recorded flow sweep plus cached interpolation stencils."""

    def __init__(self, sys: MagneticSystem, X: np.ndarray, V: np.ndarray,
                 tdir: int, quad_step: float, max_time: float = 12.0,
                 atten_subdiv: int = 8):
        sw = trace_exit(sys, X, V, tdir=tdir, max_time=max_time,
                        quad_step=quad_step)
        if np.any(sw.trapped):
            raise geo.SimplicityError(
                f"{int(sw.trapped.sum())} trapped trajectories in sweep")
        self.sys = sys
        self.tdir = tdir
        self.atten_subdiv = atten_subdiv
        self.tau = sw.tau
        self.exit_x = sw.exit_x
        self.exit_xi = sw.exit_xi
        self.counts = sw.counts
        self.ts = sw.ts
        self.xs = sw.xs
        self.vs = sw.vs
        self.qw = _quad_weights(sw.ts, sw.counts)
        self.mask = np.arange(sw.ts.shape[1])[None, :] < sw.counts[:, None]
        self._interp_idx = None
        self._interp_w = None

    def sample_values(self, f: Callable) -> np.ndarray:
        """Evaluate f(x, xi) at all valid samples, padded with zeros."""
        out = np.zeros_like(self.ts)
        out[self.mask] = f(self.xs[self.mask], self.vs[self.mask])
        return out

    def attenuation(self, pair: AdmissiblePair) -> np.ndarray:
        """Cumulative attenuation factors exp(-int_0^{t_k} a) per sample.

        Each recorded segment is subdivided with cubic Hermite positions
        (the tangent is the flow direction), so sharp coefficient
        supports are integrated to O(quad_step / subdiv) instead of
        O(quad_step). A flow-invariant attenuation component (gauge
        offsets) integrates in closed form: its contribution is the
        start-point value times the elapsed time.
        """
        m = self.atten_subdiv
        n, k = self.ts.shape
        if k < 2:
            return np.ones((n, k))
        offset = getattr(pair, "a_flow_invariant", None)
        base_a = getattr(pair, "a_base", None) if offset is not None else None
        avals_fn = base_a if base_a is not None else pair.a_values
        seg = np.where(self.mask[:, 1:], np.diff(self.ts, axis=1), 0.0)
        x0, x1 = self.xs[:, :-1], self.xs[:, 1:]
        v0, v1 = self.vs[:, :-1], self.vs[:, 1:]
        dt = (self.tdir * seg)[:, :, None]
        inc = np.zeros((n, k - 1))
        prev = None
        for j in range(m + 1):
            u = j / m
            h00 = 2 * u ** 3 - 3 * u ** 2 + 1
            h10 = u ** 3 - 2 * u ** 2 + u
            h01 = -2 * u ** 3 + 3 * u ** 2
            h11 = u ** 3 - u ** 2
            pu = h00 * x0 + h10 * dt * v0 + h01 * x1 + h11 * dt * v1
            vu = (1 - u) * v0 + u * v1
            vals = avals_fn(pu.reshape(-1, pu.shape[-1]),
                            vu.reshape(-1, pu.shape[-1])).reshape(n, k - 1)
            vals = np.where(self.mask[:, 1:], np.nan_to_num(vals), 0.0)
            if prev is not None:
                inc += 0.5 * (prev + vals) * (seg / m)
            prev = vals
        acc = np.concatenate([np.zeros((n, 1)), np.cumsum(inc, axis=1)], axis=1)
        if offset is not None:
            q = np.asarray(offset(self.xs[:, 0], self.vs[:, 0]), dtype=float)
            acc = acc + q[:, None] * self.ts
        return np.exp(-acc)

    def grid_stencils(self, grid: SphereBundleGrid):
        if self._interp_idx is None:
            flat_idx = np.zeros(self.ts.shape + (2 ** (2 * grid.sys.dim - 1),), dtype=np.int32)
            flat_w = np.zeros_like(flat_idx, dtype=float)
            idx, w = grid.interp(self.xs[self.mask], self.vs[self.mask])
            flat_idx[self.mask] = idx
            flat_w[self.mask] = w
            self._interp_idx, self._interp_w = flat_idx, flat_w
        return self._interp_idx, self._interp_w

    def quadrature_matrix(self, grid: SphereBundleGrid,
                          factors: np.ndarray, sign: float) -> sp.csr_matrix:
        """Sparse matrix mapping grid values f to sign * sum_k factors_k *
        qw_k * f(sample_k) per row."""
        idx, w = self.grid_stencils(grid)
        coef = (sign * factors * self.qw)[:, :, None] * w
        rows = np.broadcast_to(np.arange(self.ts.shape[0])[:, None, None], idx.shape)
        mat = sp.coo_matrix((coef.ravel(), (rows.ravel(), idx.ravel())),
                            shape=(self.ts.shape[0], grid.n_nodes))
        return mat.tocsr()


class Workspace:
    """Pair-independent geometry for one (system, grids) combination.

    Holds the backward sweep from every interior phase node, the forward
    exit data, and the boundary sweeps used by the albedo construction.
    Build once, then derive a TransportContext per coefficient pair.
    """

    def __init__(self, sys: MagneticSystem, grid: SphereBundleGrid,
                 bgrid_in: Optional[BoundaryGrid] = None,
                 bgrid_out: Optional[BoundaryGrid] = None,
                 quad_step: float = 0.02, max_time: float = 12.0):
        self.sys = sys
        self.grid = grid
        self.bgrid_in = bgrid_in
        self.bgrid_out = bgrid_out
        X, V = grid.phase_nodes()
        self.sweep_bw = _Sweep(sys, X, V, tdir=-1, quad_step=quad_step,
                               max_time=max_time, atten_subdiv=6)
        fw = trace_exit(sys, X, V, tdir=1, max_time=max_time)
        if np.any(fw.trapped):
            raise geo.SimplicityError("trapped forward trajectory on grid")
        self.tau_plus = fw.tau
        self.exit_fwd_x = fw.exit_x
        self.exit_fwd_xi = fw.exit_xi
        self.tau_minus = -self.sweep_bw.tau
        self.tau = self.tau_plus + self.sweep_bw.tau
        self.quad_step = quad_step
        self.max_time = max_time
        self._exit_stencil = None
        self.sweep_out = None
        self.sweep_in = None
        if bgrid_out is not None:
            Xo, Vo = bgrid_out.nodes()
            self.sweep_out = _Sweep(sys, Xo, Vo, tdir=-1, quad_step=quad_step,
                                    max_time=max_time, atten_subdiv=12)
        if bgrid_in is not None:
            Xi_, Vi_ = bgrid_in.nodes()
            self.sweep_in = _Sweep(sys, Xi_, Vi_, tdir=1, quad_step=quad_step,
                                   max_time=max_time, atten_subdiv=12)

    # stencil of backward exits of interior nodes in the incoming grid
    def exit_in_stencil(self):
        if self._exit_stencil is None:
            if self.bgrid_in is None:
                raise ValueError("workspace has no incoming boundary grid")
            self._exit_stencil = self.bgrid_in.interp(self.sweep_bw.exit_x,
                                                      self.sweep_bw.exit_xi)
        return self._exit_stencil

    def context(self, pair: AdmissiblePair) -> "TransportContext":
        return TransportContext(self, pair)


# ---------------------------------------------------------------------------
# per-pair operators

class TransportContext:
    """Discrete transport operators for one admissible pair on a Workspace."""

    def __init__(self, ws: Workspace, pair: AdmissiblePair):
        self.ws = ws
        self.sys = ws.sys
        self.grid = ws.grid
        self.pair = pair
        grid = ws.grid
        self._E_bw = ws.sweep_bw.attenuation(pair)       # E(x,xi,-s,0) per sample
        self.E_tau_minus = self._E_bw[np.arange(self._E_bw.shape[0]),
                                      ws.sweep_bw.counts - 1]
        self.R = ws.sweep_bw.quadrature_matrix(grid, self._E_bw, sign=-1.0)
        X = grid.x
        c = grid.sys.conformal(X)
        dirs_u = grid.dirs
        nx, nd = grid.n_spatial, grid.n_dir
        eta = np.broadcast_to(dirs_u[None, None, :, :], (nx, nd, nd, grid.sys.dim))
        xi = np.broadcast_to(dirs_u[None, :, None, :], (nx, nd, nd, grid.sys.dim))
        xx = np.broadcast_to(X[:, None, None, :], (nx, nd, nd, grid.sys.dim))
        scale = 1.0 / np.sqrt(c)[:, None, None, None]
        k_base = getattr(pair, "k_base", None)
        gauge_lw = getattr(pair, "gauge_log_w", None)
        k_eval = k_base if (k_base is not None and gauge_lw is not None) \
            else pair.k_values
        if pair.k is None:
            kraw = np.zeros((nx, nd, nd))
        else:
            kraw = k_eval(xx.reshape(-1, grid.sys.dim),
                          (eta * scale).reshape(-1, grid.sys.dim),
                          (xi * scale).reshape(-1, grid.sys.dim)).reshape(nx, nd, nd)
            if k_base is not None and gauge_lw is not None:
                Xn, Vn = grid.phase_nodes()
                lw = np.asarray(gauge_lw(Xn, Vn), dtype=float).reshape(nx, nd)
                kraw = kraw * np.exp(lw[:, :, None] - lw[:, None, :])
        self.kraw = kraw                                  # [x, out_dir, in_dir]
        self.kten = kraw * grid.wdir[None, None, :]
        self.sigma_p = np.einsum("b,xba->xa", grid.wdir, kraw)
        self._Kdense = None
        self._lu = None
        self._Jmat = None

    # -- basic operator applications ------------------------------------
    def apply_T1(self, u: np.ndarray) -> np.ndarray:
        u2 = u.reshape(self.grid.n_spatial, self.grid.n_dir)
        return np.einsum("xba,xa->xb", self.kten, u2)

    def apply_T0_inv(self, f: np.ndarray) -> np.ndarray:
        return (self.R @ f.ravel()).reshape(self.grid.n_spatial, self.grid.n_dir)

    def apply_K(self, u: np.ndarray) -> np.ndarray:
        return self.apply_T0_inv(self.apply_T1(u))

    def apply_J(self, uplus) -> np.ndarray:
        """J u_plus on the grid; uplus is a BoundaryFlux or a callable
        (x, xi) -> values evaluated exactly at the backward exits."""
        sw = self.ws.sweep_bw
        if callable(uplus):
            vals = np.asarray(uplus(sw.exit_x, sw.exit_xi), dtype=float)
        else:
            vals = uplus.interp_at(sw.exit_x, sw.exit_xi)
        out = self.E_tau_minus * vals
        return out.reshape(self.grid.n_spatial, self.grid.n_dir)

    def J_matrix(self) -> sp.csr_matrix:
        """Sparse J against nodal values on the incoming boundary grid."""
        if self._Jmat is None:
            idx, w = self.ws.exit_in_stencil()
            coef = self.E_tau_minus[:, None] * w
            rows = np.broadcast_to(np.arange(idx.shape[0])[:, None], idx.shape)
            self._Jmat = sp.coo_matrix(
                (coef.ravel(), (rows.ravel(), idx.ravel())),
                shape=(self.grid.n_nodes, self.ws.bgrid_in.n_nodes)).tocsr()
        return self._Jmat

    # -- norms -----------------------------------------------------------
    def l1(self, vals: np.ndarray) -> float:
        return float((self.grid.phase_weights() * np.abs(vals).ravel()).sum())

    def winv_l1(self, vals: np.ndarray) -> float:
        """tau^{-1}-weighted L1 norm (the weighted space of the solver)."""
        w = self.grid.phase_weights() / self.ws.tau
        return float((w * np.abs(vals).ravel()).sum())

    # -- assembled operators ----------------------------------------------
    def T1_matrix(self) -> sp.csr_matrix:
        nx, nd = self.grid.n_spatial, self.grid.n_dir
        rows = (np.arange(nx)[:, None, None] * nd
                + np.broadcast_to(np.arange(nd)[None, :, None], (nx, nd, nd)))
        cols = (np.arange(nx)[:, None, None] * nd
                + np.broadcast_to(np.arange(nd)[None, None, :], (nx, nd, nd)))
        return sp.coo_matrix((self.kten.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(nx * nd, nx * nd)).tocsr()

    def K_dense(self, size_cap: int = 6000) -> np.ndarray:
        """Dense K = T0inv T1, assembled blockwise over spatial cells."""
        n = self.grid.n_nodes
        if n > size_cap:
            raise MemoryError(
                f"refusing to assemble dense K at {n} nodes (cap {size_cap}); "
                "reduce the solver grid")
        if self._Kdense is None:
            nx, nd = self.grid.n_spatial, self.grid.n_dir
            Rcsc = self.R.tocsc()
            K = np.zeros((n, n))
            for ix in range(nx):
                sl = slice(ix * nd, (ix + 1) * nd)
                K[:, sl] = Rcsc[:, sl] @ self.kten[ix].T
            self._Kdense = K
        return self._Kdense

    def lu_factor(self):
        if self._lu is None:
            K = self.K_dense()
            self._lu = sla.lu_factor(np.eye(K.shape[0]) + K)
        return self._lu

    def solve_direct(self, rhs: np.ndarray) -> np.ndarray:
        lu = self.lu_factor()
        shape = rhs.shape
        out = sla.lu_solve(lu, rhs.reshape(self.grid.n_nodes, -1))
        return out.reshape(shape)

    def neumann_K_norm(self) -> float:
        """Exact L1(tau^{-1} dSigma) -> same norm of K (weighted max
        column sum; K is entrywise nonpositive so column sums suffice)."""
        w = self.grid.phase_weights() / self.ws.tau
        colsum = -((w @ self.R) @ self.T1_matrix())
        return float(np.max(colsum / w))

    def subcritical(self) -> SubcriticalReport:
        return check_subcritical(self.sys, self.pair, self.grid, ws=self.ws,
                                 ctx=self)


# ---------------------------------------------------------------------------
# module-level operation wrappers

def apply_J(ctx: TransportContext, uplus) -> PhaseField:
    return PhaseField(ctx.grid, ctx.apply_J(uplus))


def apply_T0_inv(ctx: TransportContext, f: PhaseField) -> PhaseField:
    return PhaseField(ctx.grid, ctx.apply_T0_inv(f.values))


def apply_T1(ctx: TransportContext, u: PhaseField) -> PhaseField:
    return PhaseField(ctx.grid, ctx.apply_T1(u.values))


def apply_K(ctx: TransportContext, u: PhaseField) -> PhaseField:
    return PhaseField(ctx.grid, ctx.apply_K(u.values))


def check_subcritical(sys: MagneticSystem, pair: AdmissiblePair,
                      grid: SphereBundleGrid, ws: Optional[Workspace] = None,
                      ctx: Optional[TransportContext] = None,
                      variation_margin: float = 0.02) -> SubcriticalReport:
    """Evaluate the two subcritical conditions on the grid.

    The condition-1 flag is conservative: the grid supremum of
    tau * sigma_p is inflated by a small variation margin before the
    comparison with 1.
    """
    if ws is None:
        ws = Workspace(sys, grid)
    if ctx is None:
        ctx = ws.context(pair)
    tau = ws.tau
    sig = ctx.sigma_p.ravel()
    X, V = grid.phase_nodes()
    av = pair.a_values(X, V)
    sup_ts = float((tau * sig).max())
    min_gap = float((av - sig).min())
    cond1 = sup_ts * (1.0 + variation_margin) < 1.0
    cond2 = min_gap >= -1e-9
    inside = np.repeat(np.linalg.norm(grid.x, axis=1), grid.n_dir) \
        <= pair.support_radius + 1e-12
    c0 = float(tau[inside].min()) if inside.any() else float(tau.min())
    return SubcriticalReport(sup_tau_sigma=sup_ts, min_gap=min_gap,
                             cond1=bool(cond1), cond2=bool(cond2),
                             c0=c0, diam_mu=float(tau.max()))


@dataclass
class SolveReport:
    mode: str
    terms: int
    residual_winv: float
    truncation_bound: float = 0.0


def solve_forward(ctx: TransportContext, uplus, mode: str = "auto",
                  force: bool = False, tol: float = 1e-10,
                  max_terms: int = 200) -> tuple[PhaseField, SolveReport]:
    """Solve (Id + K) u = J u_plus.

    mode "neumann" sums the alternating series sum_j (-K)^j J u_plus and
    requires subcritical condition 1 (unless forced); "direct" LU-solves
    the dense discrete system; "auto" picks neumann when condition 1
    holds, else direct when condition 2 holds, else refuses.
    """
    rep = ctx.subcritical()
    if mode == "auto":
        if rep.cond1:
            mode = "neumann"
        elif rep.cond2:
            mode = "direct"
        elif not force:
            raise SubcriticalError(
                "neither subcritical condition holds; pass force=True to "
                "attempt a direct solve anyway")
        else:
            mode = "direct"
    rhs = ctx.apply_J(uplus)
    if mode == "neumann":
        if not rep.cond1 and not force:
            raise SubcriticalError(
                f"Neumann series requested but sup tau*sigma_p = "
                f"{rep.sup_tau_sigma:.4g} >= 1")
        u = rhs.copy()
        term = rhs.copy()
        nterms = 1
        for _ in range(max_terms - 1):
            term = -ctx.apply_K(term)
            u = u + term
            nterms += 1
            if ctx.winv_l1(term) < tol:
                break
        q = min(rep.sup_tau_sigma, 0.999999)
        tail = q ** nterms / max(1 - q, 1e-12) * ctx.winv_l1(rhs)
        out = PhaseField(ctx.grid, u)
        res = ctx.winv_l1(out.values + ctx.apply_K(out.values) - rhs)
        return out, SolveReport(mode="neumann", terms=nterms,
                                residual_winv=res, truncation_bound=tail)
    if mode == "direct":
        u = ctx.solve_direct(rhs.ravel()).reshape(rhs.shape)
        out = PhaseField(ctx.grid, u)
        res = ctx.winv_l1(out.values + ctx.apply_K(out.values) - rhs)
        return out, SolveReport(mode="direct", terms=1, residual_winv=res)
    raise ValueError(f"unknown mode {mode!r}")


def estimate_T1T0inv_norm(ctx: TransportContext) -> float:
    """Exact L1 -> L1 norm of T1 T0inv on the discrete level.

    The product is entrywise sign-definite (T0inv <= 0, T1 >= 0), so the
    weighted max column sum reduces to one left multiplication.
    """
    w = ctx.grid.phase_weights()
    left = w @ ctx.T1_matrix()              # row vector
    colsum = -(left @ ctx.R)
    return float(np.max(colsum / w))
