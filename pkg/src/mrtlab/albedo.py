"""Discrete albedo operators and their kernel decomposition.

The albedo operator maps incoming boundary flux to outgoing flux
through the transport solution. Its Schwartz kernel splits into a
ballistic delta (attenuated transport along each chord), a single
scattering part supported on broken geodesics, and a bounded remainder
from two or more scatterings. The discrete operator mirrors the split:

  A = A1 + A_scatter,
  A1        ballistic: every incoming node's d_mu mass is pushed to its
            forward exit, attenuated, and splatted onto the outgoing
            grid with interpolation weights (a partition of unity, so
            per-column ballistic masses are exact),
  A_scatter = B T1 (Id + K)^{-1} J: the scattered source T1 u of the
            interior solve, integrated with attenuation along the
            backward ray of each outgoing node.

The single-scattering matrix A2 = B T1 J (one scattering event, same
quadrature and interpolation as the full build) defines the residual
A3 = A - A1 - A2, which carries the ( >= 2)-scattering content and
shrinks quadratically with the scattering amplitude.

Matrix entries act on nodal flux values; L1 -> L1 operator norms are
exact weighted maximum column sums under the d_mu node weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from .geometry import MagneticSystem, PhasePoint
from .phase_space import BoundaryFlux, BoundaryGrid
from .transport import AdmissiblePair, TransportContext, Workspace

__all__ = [
    "AlbedoOperator", "KernelDecomposition", "build_albedo",
    "kernel_alpha1", "kernel_alpha2", "Alpha2Value", "decompose_kernel",
    "albedo_opnorm_L1", "grid_fingerprint",
]


def grid_fingerprint(sys: MagneticSystem, bgrid_in: BoundaryGrid,
                     bgrid_out: BoundaryGrid) -> str:
    text = json.dumps({
        "sys": sys.hash_key(),
        "in": [bgrid_in.n_pos, bgrid_in.n_dir, bgrid_in.eps_graze],
        "out": [bgrid_out.n_pos, bgrid_out.n_dir, bgrid_out.eps_graze],
    }, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class AlbedoOperator:
    """Dense discrete albedo matrix with its ballistic/scattered split.

    matrix rows are outgoing nodes, columns incoming nodes; apply()
    takes nodal incoming values to nodal outgoing values. The exit
    tables record, per incoming node, the forward exit phase point with
    its attenuation factor, and per outgoing node the backward exit
    (the data the extraction experiments read).
    """

    bgrid_in: BoundaryGrid
    bgrid_out: BoundaryGrid
    matrix: np.ndarray            # (N_out, N_in)
    ballistic: np.ndarray         # (N_out, N_in) splat part A1
    in_exit_x: np.ndarray         # (N_in, n) forward exit positions
    in_exit_xi: np.ndarray
    in_E: np.ndarray              # (N_in,) attenuation over each chord
    out_exit_x: np.ndarray        # (N_out, n) backward exit positions
    out_exit_xi: np.ndarray
    out_E: np.ndarray             # (N_out,)
    meta: dict = field(default_factory=dict)
    context: Optional[TransportContext] = None   # live handle, not serialized

    @property
    def scatter(self) -> np.ndarray:
        return self.matrix - self.ballistic

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(values, dtype=float).ravel()

    def apply_flux(self, flux: BoundaryFlux) -> BoundaryFlux:
        out = self.apply(flux.values)
        return BoundaryFlux(self.bgrid_out,
                            out.reshape(self.bgrid_out.n_pos, self.bgrid_out.n_dir))

    def column_masses(self) -> np.ndarray:
        """L1(d_mu) mass of each column relative to its node mass."""
        w_out = self.bgrid_out.mu_w.ravel()
        w_in = self.bgrid_in.mu_w.ravel()
        return (w_out[:, None] * np.abs(self.matrix)).sum(axis=0) / w_in

    def save(self, path: str) -> None:
        np.savez_compressed(
            path, matrix=self.matrix, ballistic=self.ballistic,
            in_exit_x=self.in_exit_x, in_exit_xi=self.in_exit_xi,
            in_E=self.in_E, out_exit_x=self.out_exit_x,
            out_exit_xi=self.out_exit_xi, out_E=self.out_E,
            meta=json.dumps(self.meta, sort_keys=True))

    @classmethod
    def load(cls, path: str, bgrid_in: BoundaryGrid,
             bgrid_out: BoundaryGrid) -> "AlbedoOperator":
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"]))
        op = cls(bgrid_in=bgrid_in, bgrid_out=bgrid_out,
                 matrix=data["matrix"], ballistic=data["ballistic"],
                 in_exit_x=data["in_exit_x"], in_exit_xi=data["in_exit_xi"],
                 in_E=data["in_E"], out_exit_x=data["out_exit_x"],
                 out_exit_xi=data["out_exit_xi"], out_E=data["out_E"],
                 meta=meta)
        fp = grid_fingerprint(bgrid_in.sys, bgrid_in, bgrid_out)
        if meta.get("grid_fingerprint") not in (None, fp):
            raise ValueError(
                "albedo artifact was built on a different grid "
                f"(fingerprint {meta.get('grid_fingerprint')} != {fp})")
        return op


def build_albedo(ws: Workspace, pair: AdmissiblePair, mode: str = "delta",
                 solver_mode: str = "direct", mollify_eps: float = 0.15,
                 scenario_hash: str = "") -> AlbedoOperator:
    """Assemble the discrete albedo operator on the workspace grids.

    mode "delta" builds nodal-basis columns; "mollified" composes the
    delta matrix with unit-mass boundary mollifier columns of width
    mollify_eps. The interior solve is shared across columns through
    one LU factorization (or a Neumann matrix series under condition 1).
    """
    if ws.bgrid_in is None or ws.bgrid_out is None:
        raise ValueError("workspace needs incoming and outgoing boundary grids")
    ctx = ws.context(pair)
    bin_, bout = ws.bgrid_in, ws.bgrid_out
    n_in, n_out = bin_.n_nodes, bout.n_nodes

    # ballistic splat: push each incoming node's mass to its exit
    E_in_path = ws.sweep_in.attenuation(pair)
    E_in = E_in_path[np.arange(n_in), ws.sweep_in.counts - 1]
    ids, wgt = bout.interp(ws.sweep_in.exit_x, ws.sweep_in.exit_xi)
    w_in = bin_.mu_w.ravel()
    w_out = bout.mu_w.ravel()
    coef = (E_in * w_in)[:, None] * wgt / w_out[ids]
    cols = np.broadcast_to(np.arange(n_in)[:, None], ids.shape)
    A1 = np.zeros((n_out, n_in))
    np.add.at(A1, (ids.ravel(), cols.ravel()), coef.ravel())

    # scattered part through the interior solve
    rep = ctx.subcritical()
    if not (rep.cond1 or rep.cond2):
        raise geo.SimplicityError(
            "pair is not subcritical; refusing the albedo build")
    Ascatter = np.zeros((n_out, n_in))
    if pair.k is not None:
        E_out = ws.sweep_out.attenuation(pair)
        B = ws.sweep_out.quadrature_matrix(ws.grid, E_out, sign=+1.0)
        T1 = ctx.T1_matrix()
        J = ctx.J_matrix().toarray()
        if solver_mode == "neumann":
            if not rep.cond1:
                raise geo.SimplicityError("Neumann build requires condition 1")
            U = J.copy()
            term = J.copy()
            for _ in range(200):
                term = -(ctx.R @ (T1 @ term))
                U += term
                if np.abs(term).max() < 1e-12:
                    break
        else:
            U = ctx.solve_direct(J)
        Ascatter = B @ (T1 @ U)

    A = A1 + Ascatter
    out_E_path = ws.sweep_out.attenuation(pair)
    out_E = out_E_path[np.arange(n_out), ws.sweep_out.counts - 1]
    meta = {
        "mode": mode, "solver_mode": solver_mode, "pair": pair.hash_key(),
        "sys": ws.sys.hash_key(), "scenario_hash": scenario_hash,
        "grid_fingerprint": grid_fingerprint(ws.sys, bin_, bout),
    }
    op = AlbedoOperator(bgrid_in=bin_, bgrid_out=bout, matrix=A, ballistic=A1,
                        in_exit_x=ws.sweep_in.exit_x,
                        in_exit_xi=ws.sweep_in.exit_xi, in_E=E_in,
                        out_exit_x=ws.sweep_out.exit_x,
                        out_exit_xi=ws.sweep_out.exit_xi, out_E=out_E,
                        meta=meta, context=ctx)
    if mode == "mollified":
        from .phase_space import delta_family_w
        M = np.zeros((n_in, n_in))
        for ip in range(bin_.n_pos):
            for idir in range(bin_.n_dir):
                j = ip * bin_.n_dir + idir
                M[:, j] = delta_family_w(bin_, mollify_eps, (ip, idir)).values.ravel()
        op.matrix = A @ M
        op.ballistic = A1 @ M
        op.meta["mollify_eps"] = mollify_eps
    return op


def kernel_alpha1(sys: MagneticSystem, pair: AdmissiblePair,
                  point: PhasePoint) -> tuple[np.ndarray, np.ndarray, float]:
    """Ballistic kernel data for one incoming phase point: the forward
    exit phase point and the attenuation weight over the chord."""
    sw = geo.trace_exit(sys, point.x, point.xi, tdir=1, quad_step=sys.step)
    if sw.trapped[0]:
        raise geo.SimplicityError("trapped trajectory")
    k = sw.counts[0]
    avals = pair.a_values(sw.xs[0, :k], sw.vs[0, :k])
    integral = np.trapezoid(avals, sw.ts[0, :k])
    return sw.exit_x[0], sw.exit_xi[0], float(np.exp(-integral))


@dataclass
class Alpha2Value:
    value: float
    crossings: list
    reliable: bool


def _polyline(sys, x, xi, tdir, step=0.01):
    sw = geo.trace_exit(sys, np.atleast_2d(x), np.atleast_2d(xi), tdir=tdir,
                        quad_step=step)
    k = sw.counts[0]
    return sw.ts[0, :k] * (-1 if tdir < 0 else 1), sw.xs[0, :k], sw.vs[0, :k]


def kernel_alpha2(sys: MagneticSystem, pair: AdmissiblePair,
                  outgoing: PhasePoint, incoming: PhasePoint,
                  angle_tol: float = 1e-3, dist_tol: float = 5e-3) -> Alpha2Value:
    """Single-scattering kernel between one incoming and one outgoing
    boundary node.

    Locates every transversal crossing of the backward geodesic through
    the outgoing point with the forward geodesic from the incoming
    point (coarse polyline proximity search plus Newton refinement) and
    sums E_out * E_in * k over crossings. In n = 2 the spatial delta is
    resolved against the metric area, leaving a 1/|sin(angle)| factor
    (conformal volume factors cancel); near-tangential crossings are
    flagged unreliable. In n = 3 two curves cross only on the broken
    geodesic variety, and the value returned is the crossing amplitude
    E_out * E_in * k itself, the quantity the mollified extraction
    limit produces.
    """
    if pair.k is None:
        return Alpha2Value(value=0.0, crossings=[], reliable=True)
    t1, p1, v1 = _polyline(sys, outgoing.x, outgoing.xi, tdir=-1)
    t2, p2, v2 = _polyline(sys, incoming.x, incoming.xi, tdir=+1)
    d2 = ((p1[:, None, :] - p2[None, :, :]) ** 2).sum(axis=2)
    close = np.sqrt(d2.min(axis=1))
    crossings = []
    reliable = True
    value = 0.0
    i = 0
    while i < len(t1):
        if close[i] < (dist_tol if sys.dim == 3 else 0.03):
            j = int(np.argmin(d2[i]))
            i_lo = i
            while i < len(t1) and close[i] < (dist_tol if sys.dim == 3 else 0.03):
                if close[i] < close[i_lo]:
                    i_lo, j = i, int(np.argmin(d2[i]))
                i += 1
            s, r = _refine_crossing(sys, outgoing, incoming,
                                    float(t1[i_lo]), float(t2[j]))
            if s is None:
                continue
            x1c, v1c = geo.flow(sys, outgoing.x, outgoing.xi, s)
            x2c, v2c = geo.flow(sys, incoming.x, incoming.xi, r)
            gap = float(np.linalg.norm(x1c[0] - x2c[0]))
            if sys.dim == 2 and gap > 1e-7:
                continue
            if sys.dim == 3 and gap > dist_tol:
                continue
            u1 = v1c[0] / np.linalg.norm(v1c[0])
            u2 = v2c[0] / np.linalg.norm(v2c[0])
            sin_angle = float(np.sqrt(max(0.0, 1.0 - (u1 @ u2) ** 2)))
            E1 = _attenuation_over(sys, pair, outgoing, s, 0.0)
            E2 = _attenuation_over(sys, pair, incoming, 0.0, r)
            kval = float(pair.k_values(x2c, v2c[0][None, :], v1c[0][None, :])[0])
            if sys.dim == 2:
                if sin_angle < angle_tol:
                    reliable = False
                contrib = E1 * E2 * kval / max(sin_angle, angle_tol)
            else:
                contrib = E1 * E2 * kval
                if sin_angle < angle_tol:
                    reliable = False
            value += contrib
            crossings.append({"s": s, "r": r, "x": x1c[0].tolist(),
                              "sin_angle": sin_angle, "k": kval,
                              "E_out": E1, "E_in": E2})
        else:
            i += 1
    return Alpha2Value(value=value, crossings=crossings, reliable=reliable)


def _attenuation_over(sys, pair, point, s, t) -> float:
    from .transport import attenuation_E
    return attenuation_E(sys, pair, point, s, t)


def _refine_crossing(sys, out_pt, in_pt, s0, r0, iters=30):
    s, r = s0, r0
    for _ in range(iters):
        x1, v1 = geo.flow(sys, out_pt.x, out_pt.xi, s)
        x2, v2 = geo.flow(sys, in_pt.x, in_pt.xi, r)
        res = x1[0] - x2[0]
        if np.linalg.norm(res) < 1e-10:
            break
        jac = np.stack([v1[0], -v2[0]], axis=1)
        if sys.dim == 3:
            # least squares in the curve parameters
            sol, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        else:
            try:
                sol = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                return None, None
        step_s, step_r = float(sol[0]), float(sol[1])
        lam = 1.0
        nr0 = np.linalg.norm(res)
        while lam > 1e-4:
            s_try, r_try = s + lam * step_s, r + lam * step_r
            try:
                x1t, _ = geo.flow(sys, out_pt.x, out_pt.xi, s_try)
                x2t, _ = geo.flow(sys, in_pt.x, in_pt.xi, r_try)
            except geo.DomainError:
                lam *= 0.5
                continue
            if np.linalg.norm(x1t[0] - x2t[0]) < nr0:
                s, r = s_try, r_try
                break
            lam *= 0.5
        else:
            break
    return s, r


@dataclass
class KernelDecomposition:
    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    alpha3_col_sup: float
    col_norms: np.ndarray


def decompose_kernel(op: AlbedoOperator, ctx: Optional[TransportContext] = None
                     ) -> KernelDecomposition:
    """Split the albedo matrix as A1 + A2 + A3 with A2 the discrete
    single-scattering operator B T1 J (one scattering event, built from
    the same sweeps and interpolation as the albedo itself)."""
    ctx = ctx or op.context
    if ctx is None:
        raise ValueError("decomposition needs the transport context")
    ws = ctx.ws
    pair = ctx.pair
    if pair.k is None:
        A2 = np.zeros_like(op.matrix)
    else:
        E_out = ws.sweep_out.attenuation(pair)
        B = ws.sweep_out.quadrature_matrix(ws.grid, E_out, sign=+1.0)
        A2 = B @ (ctx.T1_matrix() @ ctx.J_matrix().toarray())
    A3 = op.matrix - op.ballistic - A2
    w_out = op.bgrid_out.mu_w.ravel()
    w_in = op.bgrid_in.mu_w.ravel()
    col = (w_out[:, None] * np.abs(A3)).sum(axis=0) / w_in
    return KernelDecomposition(A1=op.ballistic, A2=A2, A3=A3,
                               alpha3_col_sup=float(col.max()), col_norms=col)


def albedo_opnorm_L1(opA: AlbedoOperator | np.ndarray,
                     opB: AlbedoOperator | np.ndarray | None = None,
                     bgrid_in: Optional[BoundaryGrid] = None,
                     bgrid_out: Optional[BoundaryGrid] = None) -> float:
    """Exact L1(d_mu) -> L1(d_mu) operator norm of A - B (max weighted
    column sum). With one argument, the norm of A itself."""
    if isinstance(opA, AlbedoOperator):
        bgrid_in = opA.bgrid_in
        bgrid_out = opA.bgrid_out
        A = opA.matrix
    else:
        A = opA
    Bm = 0.0
    if opB is not None:
        Bm = opB.matrix if isinstance(opB, AlbedoOperator) else opB
    D = A - Bm
    w_out = bgrid_out.mu_w.ravel()
    w_in = bgrid_in.mu_w.ravel()
    return float(((w_out[:, None] * np.abs(D)).sum(axis=0) / w_in).max())
