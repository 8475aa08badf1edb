"""Grids, quadrature, the phase-space/boundary identity, mollifiers."""

import numpy as np
import pytest

from mrtlab import geometry as geo
from mrtlab import phase_space as ps

TWO_PI_SQ = 2 * np.pi ** 2     # area pi times fiber 2 pi


def test_fiber_mass(grid_flat, sys_ball):
    assert grid_flat.wdir.sum() == pytest.approx(2 * np.pi, abs=1e-9)
    g3 = ps.build_sm_grid(sys_ball, spatial=(3, 3, 6), fiber=(4, 8))
    assert g3.wdir.sum() == pytest.approx(4 * np.pi, abs=1e-6)
    assert np.all(g3.wdir > 0)
    assert np.all(grid_flat.phase_weights() > 0)


def test_integrate_sm_flat(grid_flat):
    val = ps.integrate_sm(grid_flat, lambda x, v: np.ones(x.shape[0]))
    assert val == pytest.approx(TWO_PI_SQ, rel=1e-9)


def test_integrate_boundary_flat(sys_flat):
    bp = ps.build_boundary_grid(sys_flat, "+", (48,), (32,))
    val = ps.integrate_boundary(bp, lambda x, v: np.ones(x.shape[0]))
    assert val == pytest.approx(4 * np.pi, abs=1e-4)


def test_integrate_conformal_refined_oracle(sys_conformal):
    # volume of the conformal disk at default-scale resolution vs a
    # refined-grid reference
    coarse = ps.build_sm_grid(sys_conformal, spatial=(32, 64), fiber=(8,))
    fine = ps.build_sm_grid(sys_conformal, spatial=(96, 160), fiber=(8,))
    one = lambda x, v: np.ones(x.shape[0])
    v_c = ps.integrate_sm(coarse, one) / coarse.wdir.sum()
    v_f = ps.integrate_sm(fine, one) / fine.wdir.sum()
    assert abs(v_c - v_f) / v_f < 1e-4
    # closed form: int (1 + 0.2 r^2) r dr dth = pi (1 + 0.1)
    assert v_f == pytest.approx(1.1 * np.pi, rel=2e-5)


def test_boundary_mass_symmetry(sys_b03):
    bp = ps.build_boundary_grid(sys_b03, "+", (40,), (24,))
    bm = ps.build_boundary_grid(sys_b03, "-", (40,), (24,))
    assert abs(bp.total_mass() - bm.total_mass()) < 1e-6


def test_santalo_flat_one(sys_flat, grid_flat):
    bp = ps.build_boundary_grid(sys_flat, "+", (48,), (32,))
    bm = ps.build_boundary_grid(sys_flat, "-", (48,), (32,))
    rep = ps.santalo_check(sys_flat, grid_flat, bp, bm,
                           lambda x, v: np.ones(x.shape[0]))
    for val in (rep.lhs, rep.rhs_plus, rep.rhs_minus):
        assert abs(val - TWO_PI_SQ) / TWO_PI_SQ < 1e-2
    assert max(rep.discrepancies.values()) < 1e-2


def test_santalo_zero(sys_flat, grid_flat):
    bp = ps.build_boundary_grid(sys_flat, "+", (16,), (8,))
    bm = ps.build_boundary_grid(sys_flat, "-", (16,), (8,))
    rep = ps.santalo_check(sys_flat, grid_flat, bp, bm,
                           lambda x, v: np.zeros(x.shape[0]))
    assert rep.lhs == rep.rhs_plus == rep.rhs_minus == 0.0


def test_santalo_magnetic(sys_b03, grid_b03):
    bp = ps.build_boundary_grid(sys_b03, "+", (48,), (32,))
    bm = ps.build_boundary_grid(sys_b03, "-", (48,), (32,))
    rep = ps.santalo_check(sys_b03, grid_b03, bp, bm,
                           lambda x, v: (x * x).sum(axis=1))
    assert max(rep.discrepancies.values()) < 1e-2


INTEGRANDS = [
    lambda x, v: np.ones(x.shape[0]),
    lambda x, v: (x * x).sum(axis=1),
    lambda x, v: np.exp(-2 * (x * x).sum(axis=1)),
    lambda x, v: 1.0 + 0.5 * v[:, 0] / np.linalg.norm(v, axis=1),
    lambda x, v: x[:, 0] * v[:, 1] / np.linalg.norm(v, axis=1) + 2.0,
]


def test_santalo_suite(sys_flat, sys_b03, sys_conformal):
    for sys in (sys_flat, sys_b03, sys_conformal):
        grid = ps.build_sm_grid(sys, spatial=(12, 24), fiber=(24,))
        bp = ps.build_boundary_grid(sys, "+", (48,), (32,))
        bm = ps.build_boundary_grid(sys, "-", (48,), (32,))
        for f in INTEGRANDS:
            rep = ps.santalo_check(sys, grid, bp, bm, f)
            assert max(rep.discrepancies.values()) < 1e-2, sys.descriptor


def test_sm_interpolation_consistency(grid_b03):
    # first-order consistent; the merged inner rings trade pointwise
    # accuracy near the center for L1 stability of adjoint sums
    f = lambda x, v: np.sin(2 * x[:, 0]) + x[:, 1] * v[:, 0]
    X, V = grid_b03.phase_nodes()
    vals = f(X, V).reshape(grid_b03.n_spatial, grid_b03.n_dir)
    rng = np.random.default_rng(0)
    xq = rng.uniform(-0.7, 0.7, size=(300, 2))
    vq = rng.normal(size=(300, 2))
    vq /= np.linalg.norm(vq, axis=1)[:, None]
    approx = grid_b03.interp_values(vals, xq, vq)
    err = np.abs(approx - f(xq, vq))
    assert err.max() < 0.1
    outer = np.linalg.norm(xq, axis=1) > 0.35
    assert err[outer].max() < 0.07


def test_boundary_flux_and_interp(sys_flat):
    bp = ps.build_boundary_grid(sys_flat, "+", (32,), (16,))
    f = lambda x, v: 1.0 + x[:, 0] + 0.3 * v[:, 1]
    flux = ps.BoundaryFlux.from_callable(bp, f)
    X, V = bp.nodes()
    vals = flux.interp_at(X[::7], V[::7])
    assert np.abs(vals - f(X[::7], V[::7])).max() < 1e-9
    assert flux.l1_norm() > 0


# --- mollifier families -----------------------------------------------------

def test_w_family_unit_mass(sys_flat):
    bp = ps.build_boundary_grid(sys_flat, "+", (48,), (32,))
    for eps in (0.2, 0.1, 0.05):
        w = ps.delta_family_w(bp, eps, (5, 12))
        assert w.mass() == pytest.approx(1.0, abs=1e-6)


def test_scalar_and_fiber_mollifiers(sys_flat, sys_ball):
    psi = ps.scalar_mollifier(0.1)
    assert psi(0.0) == 1.0
    assert psi(0.2) == 0.0
    for sys, dim in ((sys_flat, 2), (sys_ball, 3)):
        for eps in (0.3, 0.1):
            f = ps.fiber_mollifier(sys, eps, dim=dim)
            # quadrature of the mass over the fiber
            if dim == 2:
                th = np.linspace(-np.pi, np.pi, 20001)
                mass = np.trapezoid(f(np.abs(th)), th)
            else:
                th = np.linspace(0, np.pi, 20001)
                mass = 2 * np.pi * np.trapezoid(f(th) * np.sin(th), th)
            assert mass == pytest.approx(1.0, abs=1e-5)


def test_h1_defining_function(sys_ball):
    y = np.array([0.1, 0.0, 0.05])
    eta = sys_ball.unit(y, np.array([1.0, 0.0, 0.0]))[0]
    eta_p = sys_ball.unit(y, np.array([0.2, 1.0, 0.0]))[0]
    h1 = ps.defining_h1(sys_ball, y, eta, eta_p)
    # points of the defining set: backward exits of span directions
    rng = np.random.default_rng(1)
    zs = []
    for _ in range(20):
        c1, c2 = rng.normal(size=2)
        d = sys_ball.unit(y, c1 * eta + c2 * eta_p)[0]
        sw = geo.trace_exit(sys_ball, y[None, :], d[None, :], tdir=-1)
        zs.append(sw.exit_x[0])
    vals = h1(np.array(zs))
    assert np.abs(vals).max() < 5e-6
    # an out-of-plane direction exits away from the set
    d_off = sys_ball.unit(y, np.array([0.0, 0.0, 1.0]))[0]
    sw = geo.trace_exit(sys_ball, y[None, :], d_off[None, :], tdir=-1)
    assert h1(sw.exit_x[None, 0])[0] > 0.3


def test_h1_degenerate_error(sys_ball):
    y = np.array([0.0, 0.0, 0.0])
    e = np.array([1.0, 0.0, 0.0])
    with pytest.raises(ps.DegenerateConfigurationError):
        ps.defining_h1(sys_ball, y, e, -e)


def test_h2_properties(sys_ball):
    y = np.array([0.05, -0.1, 0.0])
    eta = sys_ball.unit(y, np.array([1.0, 0.0, 0.0]))[0]
    eta_p = sys_ball.unit(y, np.array([0.0, 1.0, 0.3]))[0]
    fam = ps.defining_h2(sys_ball, y, eta, eta_p)
    assert abs(fam(fam.x_star[None, :])[0]) < 1e-8
    assert fam.norm2 > 0
    # dh2(h(s))/ds at 0 equals |eta*|^2 by finite differences
    def h_of(s):
        if abs(s) < 1e-15:
            return fam.x_star
        xz, _ = geo.flow(sys_ball, y, eta, s)
        b = geo.transport_along(sys_ball, y, eta, eta_p, s)
        b = sys_ball.unit(xz, b)
        sw = geo.trace_exit(sys_ball, xz, b, tdir=-1)
        return sw.exit_x[0]
    fd = 2e-3
    d_fd = (fam(h_of(fd)[None, :])[0] - fam(h_of(-fd)[None, :])[0]) / (2 * fd)
    assert d_fd == pytest.approx(fam.norm2, rel=5e-3)


def test_chi_mass(sys_ball):
    y = np.array([0.0, 0.0, 0.1])
    eta = np.array([1.0, 0.0, 0.0])
    eta_p = np.array([0.0, 1.0, 0.0])
    fam = ps.defining_h2(sys_ball, y, eta, eta_p)
    for delta in (0.2, 0.05):
        chi = ps.family_chi_delta(delta, lambda t: np.asarray(t), fam.norm2)
        h = np.linspace(-delta, delta, 40001)
        mass = np.trapezoid(chi(h), h)
        assert mass == pytest.approx(fam.norm2, rel=1e-6)


def test_phi_rho_peak():
    phi = ps.family_phi_rho(0.2, lambda z: np.zeros(np.atleast_2d(z).shape[0]))
    assert phi(np.zeros((3, 3)))[0] == 1.0


def test_grid_export(grid_flat, sys_flat):
    doc = grid_flat.export()
    assert doc["dim"] == 2
    assert len(doc["spatial_nodes"]) == grid_flat.n_spatial
    bp = ps.build_boundary_grid(sys_flat, "+", (16,), (8,))
    bdoc = bp.export()
    assert bdoc["side"] == "+"
    assert len(bdoc["mu_weights"]) == bp.n_pos
