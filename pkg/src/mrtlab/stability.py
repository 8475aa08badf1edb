"""Stability of gauge classes under albedo perturbations.

The experiment measures eps = |A - A~| (exact L1 -> L1 matrix norm),
constructs the equivalent representative (a', k') through the
normalized trial gauge, and checks the two final estimates

    |a' - a~|_inf  <=  C eps,        |k' - k~|_1  <=  C eps,

with the constant assembled from the class data:

    C1 = (1 + 2 diam rho w_{n-1} exp(diam Sigma))
         * exp(2 diam (eps exp(diam Sigma) / c0 + Sigma)),
    C  = max(Vol(boundary) w_{n-1} C1, exp(diam Sigma) / c0),

where diam is the sup of the travel time, c0 its inf over chords
meeting the coefficient support, Sigma and rho the class bounds on
|a|_inf and the fiber-integrated kernel, and w_{n-1} the volume of the
unit ball of R^{n-1}. C1 contains the measured eps itself, so the
constant is run dependent by construction.

The pre-estimates feeding the proof are checked directly:

    (pre-1)  |E - E~| over each incoming chord  <=  eps,
    (pre-2)  int int F |k - k~|  <=  eps + int int |F - F~| k~

along sampled incoming rays, with F the broken-geodesic attenuation
E(x, xi, tau_-, 0) E(x, eta, 0, tau_+). The intermediate bound
|log w| <= exp(diam Sigma) eps on the outgoing boundary and the lower
bound F' >= exp(-2(eps exp(diam Sigma) + diam Sigma)) are recorded per
run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import geometry as geo
from .geometry import MagneticSystem, PhasePoint
from .albedo import AlbedoOperator, albedo_opnorm_L1, build_albedo
from .gauge import construct_equivalent_pair, kernel_l1_distance, trial_gauge
from .phase_space import SphereBundleGrid
from .transport import AdmissiblePair, Workspace, _Sweep, attenuation_E

__all__ = [
    "broken_attenuation_F", "check_pre1", "check_pre2",
    "stability_experiment", "StabilityRun", "Pre1Report", "Pre2Report",
    "unit_ball_volume",
]


def unit_ball_volume(d: int) -> float:
    """Volume of the unit ball of R^d (w_{n-1} in the constant)."""
    from math import gamma, pi
    return pi ** (d / 2) / gamma(d / 2 + 1)


def broken_attenuation_F(sys: MagneticSystem, pair: AdmissiblePair,
                         x, xi, eta) -> float:
    """Total attenuation along the broken geodesic: in along xi to x,
    out along eta."""
    p_in = PhasePoint.make(sys, x, xi)
    p_out = PhasePoint.make(sys, x, eta)
    tm, _ = geo.exit_times(sys, p_in)
    _, tp = geo.exit_times(sys, p_out)
    return attenuation_E(sys, pair, p_in, tm, 0.0) \
        * attenuation_E(sys, pair, p_out, 0.0, tp)


@dataclass
class Pre1Report:
    lhs: np.ndarray            # |E - E~| per incoming node
    rhs: float                 # |A - A~|
    max_violation: float       # max(lhs) - rhs

    @property
    def holds(self) -> bool:
        return self.max_violation <= 0.0

    def holds_with_slack(self, slack: float = 0.05) -> bool:
        return float(self.lhs.max()) <= self.rhs * (1 + slack) + 1e-12


def check_pre1(opA: AlbedoOperator, opB: AlbedoOperator) -> Pre1Report:
    """|E - E~| over each incoming chord against the operator distance.

    Both attenuations come from the stored forward-exit tables (built
    from the ground-truth coefficients); the right side is the exact
    discrete operator norm.
    """
    lhs = np.abs(opA.in_E - opB.in_E)
    rhs = albedo_opnorm_L1(opA, opB)
    return Pre1Report(lhs=lhs, rhs=rhs, max_violation=float(lhs.max()) - rhs)


@dataclass
class Pre2Report:
    lhs: np.ndarray
    rhs: np.ndarray
    rays: int

    def holds_with_slack(self, slack: float = 0.05) -> bool:
        scale = np.maximum(np.abs(self.rhs), 1e-12)
        return bool(np.all(self.lhs <= self.rhs + slack * scale + 1e-12))


def check_pre2(sys: MagneticSystem, pairA: AdmissiblePair,
               pairB: AdmissiblePair, eps_norm: float,
               start_x: np.ndarray, start_xi: np.ndarray,
               fiber_dirs: np.ndarray, fiber_w: np.ndarray,
               r_step: float = 0.1) -> Pre2Report:
    """Evaluate both sides of the single-scattering pre-estimate on the
    given incoming rays.

    The left side integrates F |k - k~| over scattering points along
    each ray and outgoing fiber directions; the right side adds the
    |F - F~|-weighted k~ integral to the operator distance. F factors
    require one forward trace per (point, direction); the sweeps are
    batched per ray.
    """
    n_rays = start_x.shape[0]
    lhs = np.zeros(n_rays)
    rhs = np.zeros(n_rays)
    for i in range(n_rays):
        base = _Sweep(sys, start_x[i][None, :], start_xi[i][None, :],
                      tdir=+1, quad_step=r_step, atten_subdiv=8)
        kpts = base.counts[0]
        ys = base.xs[0, :kpts]
        vs = base.vs[0, :kpts]
        qw = base.qw[0, :kpts]
        E_in_A = base.attenuation(pairA)[0, :kpts]
        E_in_B = base.attenuation(pairB)[0, :kpts]
        c = sys.conformal(ys)
        nd = fiber_dirs.shape[0]
        Y = np.repeat(ys, nd, axis=0)
        H = np.tile(fiber_dirs, (kpts, 1)) / np.sqrt(np.repeat(c, nd))[:, None]
        out = _Sweep(sys, Y, H, tdir=+1, quad_step=r_step, atten_subdiv=8)
        idx = np.arange(Y.shape[0])
        E_out_A = out.attenuation(pairA)[idx, out.counts - 1].reshape(kpts, nd)
        E_out_B = out.attenuation(pairB)[idx, out.counts - 1].reshape(kpts, nd)
        VV = np.repeat(vs, nd, axis=0)
        kA = pairA.k_values(Y, VV, H).reshape(kpts, nd)
        kB = pairB.k_values(Y, VV, H).reshape(kpts, nd)
        FA = E_in_A[:, None] * E_out_A
        FB = E_in_B[:, None] * E_out_B
        lhs[i] = float((qw[:, None] * fiber_w[None, :] * FA
                        * np.abs(kA - kB)).sum())
        rhs[i] = eps_norm + float((qw[:, None] * fiber_w[None, :]
                                   * np.abs(FA - FB) * kB).sum())
    return Pre2Report(lhs=lhs, rhs=rhs, rays=n_rays)


@dataclass
class StabilityRun:
    eps: float
    sigma: float
    rho: float
    c0: float
    diam_mu: float
    omega: float
    vol_boundary: float
    C1: float
    C: float
    a_dist: float
    k_dist: float
    a_bound: float
    k_bound: float
    a_pass: bool
    k_pass: bool
    logw_max: float
    logw_bound: float
    logw_pass: bool
    f_low_min: float
    f_low_bound: float
    f_low_pass: bool

    def as_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                for k, v in self.__dict__.items()}


def stability_experiment(ws: Workspace, pairA: AdmissiblePair,
                         pairB: AdmissiblePair, sigma: Optional[float] = None,
                         rho: Optional[float] = None, slack: float = 0.10,
                         n_flow_samples: int = 24,
                         opA: Optional[AlbedoOperator] = None,
                         opB: Optional[AlbedoOperator] = None) -> StabilityRun:
    """Full stability run: operator distance, constructed representative,
    the closing constant, and every inequality of the chain.

    Refuses pairs outside the declared class bounds. Passing cached
    albedo operators skips the two builds (the sweep reuses them across
    a perturbation family).
    """
    sys = ws.sys
    grid = ws.grid
    X, V = grid.phase_nodes()
    aA = pairA.a_values(X, V)
    aB = pairB.a_values(X, V)
    ctxA = ws.context(pairA)
    ctxB = ws.context(pairB)
    sup_a = max(float(np.abs(aA).max()), float(np.abs(aB).max()))
    sup_sig = max(float(ctxA.sigma_p.max()), float(ctxB.sigma_p.max()))
    sigma = sigma if sigma is not None else sup_a
    rho = rho if rho is not None else sup_sig
    if sup_a > sigma * (1 + 1e-9) or sup_sig > rho * (1 + 1e-9):
        raise ValueError(
            f"pair outside the declared class (sup|a|={sup_a:.4g} vs "
            f"Sigma={sigma:.4g}, sup sigma_p={sup_sig:.4g} vs rho={rho:.4g})")

    repA = ctxA.subcritical()
    repB = ctxB.subcritical()
    if not (repA.any_condition() and repB.any_condition()):
        raise ValueError("both pairs must satisfy a subcritical condition")

    if opA is None:
        opA = build_albedo(ws, pairA)
    if opB is None:
        opB = build_albedo(ws, pairB)
    eps = albedo_opnorm_L1(opA, opB)

    support_r = min(pairA.support_radius, pairB.support_radius)
    inside = np.repeat(np.linalg.norm(grid.x, axis=1), grid.n_dir) <= support_r + 1e-12
    c0 = float(ws.tau[inside].min())
    diam = float(ws.tau.max())
    omega = unit_ball_volume(sys.dim - 1)
    vol_b = float(ws.bgrid_in.pos_w.sum()) if ws.bgrid_in is not None else np.nan

    rep = construct_equivalent_pair(sys, pairA, pairB)
    a_dist = float(np.abs(rep.pair.a_values(X, V) - pairB.a_values(X, V)).max())
    k_dist = kernel_l1_distance(grid, rep.pair, pairB)

    exp_ds = np.exp(diam * sigma)
    C1 = (1.0 + 2.0 * diam * rho * omega * exp_ds) \
        * np.exp(2.0 * diam * (eps * exp_ds / c0 + sigma))
    C = max(vol_b * omega * C1, exp_ds / c0)

    # intermediate bound on log w at the outgoing boundary
    w_trial = trial_gauge(sys, pairA, pairB)
    Xo, Vo = ws.bgrid_out.nodes()
    step = max(1, Xo.shape[0] // 256)
    logw = w_trial.log_w(Xo[::step], Vo[::step])
    logw_max = float(np.abs(logw).max())
    logw_bound = exp_ds * eps

    # lower bound on the broken attenuation of the representative
    rng = np.random.default_rng(17)
    pick = rng.choice(np.flatnonzero(inside), size=min(n_flow_samples,
                                                       int(inside.sum())),
                      replace=False)
    f_bound = np.exp(-2.0 * (eps * exp_ds + diam * sigma))
    f_min = np.inf
    xs = X[pick]
    in_dirs = V[pick]
    out_dirs = np.roll(V[pick], 1, axis=0)
    bw = _Sweep(sys, xs, in_dirs, tdir=-1, quad_step=0.02, atten_subdiv=8)
    fw = _Sweep(sys, xs, out_dirs, tdir=+1, quad_step=0.02, atten_subdiv=8)
    E1 = bw.attenuation(rep.pair)[np.arange(len(pick)), bw.counts - 1]
    E2 = fw.attenuation(rep.pair)[np.arange(len(pick)), fw.counts - 1]
    f_min = float((E1 * E2).min())

    a_bound = C * eps
    k_bound = C * eps
    return StabilityRun(
        eps=eps, sigma=sigma, rho=rho, c0=c0, diam_mu=diam, omega=omega,
        vol_boundary=vol_b, C1=float(C1), C=float(C), a_dist=a_dist,
        k_dist=k_dist, a_bound=float(a_bound), k_bound=float(k_bound),
        a_pass=bool(a_dist <= a_bound * (1 + slack) + 1e-12),
        k_pass=bool(k_dist <= k_bound * (1 + slack) + 1e-12),
        logw_max=logw_max, logw_bound=float(logw_bound),
        logw_pass=bool(logw_max <= logw_bound * (1 + slack) + 1e-12),
        f_low_min=f_min, f_low_bound=float(f_bound),
        f_low_pass=bool(f_min >= f_bound * (1 - slack) - 1e-12))
