"""Magnetic geodesic geometry on conformally flat disks and balls.

The domain M is the closed unit ball of R^n (n = 2 or 3) in a single
chart, carrying the metric g = c(x) * (flat) with conformal factor
c(x) > 0 and a closed magnetic 2-form Omega. In n = 2 the form is
Omega = b(x) dx1^dx2; in n = 3 it is Omega = dm for a 1-form potential
m, so it is closed by construction. Trajectories are unit-speed curves
obeying Newton's law

    nabla_{gamma'} gamma' = Y(gamma'),

where the Lorentz force Y is the bundle map with <Y(xi), eta>_g =
Omega(xi, eta). For the conformal metric the Christoffel contraction
and the force have the closed forms used in _acceleration below.

All tracing is batched: positions and directions are (N, n) arrays and
a fixed-step RK4 march advances every trajectory simultaneously.
Directions are re-projected onto the unit sphere bundle after each step
(|xi|_g = 1), and boundary crossings are located by bisection on the
crossing step to 1e-10 in time. Backward flow integrates the same
vector field with reversed time; it is never implemented by flipping
the direction, because the magnetic flow is not reversible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "GeometryError", "DomainError", "SimplicityError", "ShootingError",
    "MagneticSystem", "PhasePoint", "GeodesicPath", "SimplicityReport",
    "lorentz_force", "trace_geodesic", "geodesic_through", "exit_times",
    "flow", "transport_along", "parallel_transport", "magnetic_exp",
    "magnetic_exp_inverse", "magnetic_distance", "simplicity_check",
    "trace_exit", "ExitSweep",
]


class GeometryError(Exception):
    pass


class DomainError(GeometryError):
    pass


class SimplicityError(GeometryError):
    pass


class ShootingError(GeometryError):
    pass


def _fd_gradient(f: Callable, h: float = 1e-5) -> Callable:
    def grad(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.empty_like(x)
        for i in range(x.shape[1]):
            dx = np.zeros_like(x)
            dx[:, i] = h
            out[:, i] = (f(x + dx) - f(x - dx)) / (2.0 * h)
        return out
    return grad


def _fd_two_form(m: Callable, h: float = 1e-5) -> Callable:
    """Exterior derivative of a 1-form m on R^3 by central differences:
    Omega_ij = d_i m_j - d_j m_i."""
    def omega(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        jac = np.empty((x.shape[0], 3, 3))
        for i in range(3):
            dx = np.zeros_like(x)
            dx[:, i] = h
            jac[:, i, :] = (m(x + dx) - m(x - dx)) / (2.0 * h)
        return jac - np.transpose(jac, (0, 2, 1))
    return omega


@dataclass(frozen=True)
class MagneticSystem:
    """A simple magnetic system on the unit ball in chart coordinates.

    conformal / conformal_grad evaluate c and its gradient at (N, n)
    points; field_b (n = 2) gives the scalar magnetic field, while
    omega_matrix (n = 3) gives the 2-form matrix Omega_ij = dm. step is
    the RK4 integrator step (1e-3 of the domain diameter by default,
    fixed for reproducibility).
    """

    dim: int
    conformal: Callable
    conformal_grad: Callable
    field_b: Optional[Callable] = None
    omega_matrix: Optional[Callable] = None
    step: float = 2e-3
    c_min: float = field(default=0.0, compare=False)
    descriptor: str = "custom"

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise GeometryError("dimension must be 2 or 3")
        probe = _ball_probe(self.dim)
        cvals = self.conformal(probe)
        if np.any(cvals <= 0.0):
            raise GeometryError("conformal factor must be positive on the ball")
        object.__setattr__(self, "c_min", float(cvals.min()))

    # -- metric helpers -------------------------------------------------
    def metric_norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        c = self.conformal(np.atleast_2d(x))
        v = np.atleast_2d(v)
        return np.sqrt(c * (v * v).sum(axis=1))

    def unit(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Project v onto the unit sphere bundle at x."""
        x = np.atleast_2d(x)
        v = np.atleast_2d(v)
        return v / self.metric_norm(x, v)[:, None]

    def lorentz(self, x: np.ndarray, v: np.ndarray,
                c: Optional[np.ndarray] = None) -> np.ndarray:
        """Lorentz force Y_x(v), defined by <Y(v), eta>_g = Omega(v, eta)."""
        x = np.atleast_2d(x)
        v = np.atleast_2d(v)
        if c is None:
            c = self.conformal(x)
        if self.dim == 2:
            if self.field_b is None:
                return np.zeros_like(v)
            b = self.field_b(x)
            return (b / c)[:, None] * np.stack([-v[:, 1], v[:, 0]], axis=1)
        if self.omega_matrix is None:
            return np.zeros_like(v)
        om = self.omega_matrix(x)
        return np.einsum("nij,ni->nj", om, v) / c[:, None]

    def _acceleration(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        c = self.conformal(x)
        gc = self.conformal_grad(x)
        gv = (gc * v).sum(axis=1)
        vv = (v * v).sum(axis=1)
        christoffel = (2.0 * gv[:, None] * v - vv[:, None] * gc) / (2.0 * c[:, None])
        return -christoffel + self.lorentz(x, v, c=c)

    def hash_key(self) -> str:
        return f"dim{self.dim}:{self.descriptor}:step{self.step:g}"


def _ball_probe(dim: int) -> np.ndarray:
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1.0, 1.0, size=(256, dim))
    pts *= 0.999 / np.maximum(1.0, np.linalg.norm(pts, axis=1))[:, None]
    return pts


# -- constructors -------------------------------------------------------

def make_system(dim: int,
                conformal: Callable | float = 1.0,
                conformal_grad: Optional[Callable] = None,
                b: Callable | float | None = None,
                m: Optional[Callable] = None,
                omega_matrix: Optional[Callable] = None,
                step: float = 2e-3,
                descriptor: str = "custom") -> MagneticSystem:
    """Build a MagneticSystem from callables or constants.

    Gradients and, in n = 3, the exterior derivative of the potential m
    default to central finite differences when no closed form is given.
    """
    if np.isscalar(conformal):
        cval = float(conformal)
        cfun = lambda x: np.full(np.atleast_2d(x).shape[0], cval)
        cgrad = lambda x: np.zeros_like(np.atleast_2d(x))
    else:
        cfun = conformal
        cgrad = conformal_grad if conformal_grad is not None else _fd_gradient(conformal)
    bfun = None
    ofun = omega_matrix
    if dim == 2 and b is not None:
        if np.isscalar(b):
            bval = float(b)
            bfun = lambda x: np.full(np.atleast_2d(x).shape[0], bval)
        else:
            bfun = b
    if dim == 3 and ofun is None and m is not None:
        ofun = _fd_two_form(m)
    return MagneticSystem(dim=dim, conformal=cfun, conformal_grad=cgrad,
                          field_b=bfun, omega_matrix=ofun, step=step,
                          descriptor=descriptor)


def flat_disk(b: float | Callable | None = None, step: float = 2e-3) -> MagneticSystem:
    label = f"flat_disk_b{b:g}" if np.isscalar(b) else "flat_disk_bfield"
    if b is None:
        label = "flat_disk_b0"
    return make_system(2, 1.0, b=b, step=step, descriptor=label)


def flat_ball(bz: float = 0.0, step: float = 2e-3) -> MagneticSystem:
    """Flat 3-ball with uniform vertical field: m = bz/2 (x1 dx2 - x2 dx1)."""
    def m(x):
        x = np.atleast_2d(x)
        return 0.5 * bz * np.stack([-x[:, 1], x[:, 0], np.zeros(x.shape[0])], axis=1)

    def omega(x):
        x = np.atleast_2d(x)
        om = np.zeros((x.shape[0], 3, 3))
        om[:, 0, 1] = bz
        om[:, 1, 0] = -bz
        return om

    sys3 = make_system(3, 1.0, m=m, omega_matrix=omega, step=step,
                       descriptor=f"flat_ball_bz{bz:g}")
    return sys3


# -- phase points and paths ---------------------------------------------

@dataclass
class PhasePoint:
    """A point (x, xi) of the unit sphere bundle SM."""

    x: np.ndarray
    xi: np.ndarray

    @classmethod
    def make(cls, sys: MagneticSystem, x, direction) -> "PhasePoint":
        x = np.asarray(x, dtype=float)
        if np.linalg.norm(x) > 1.0 + 1e-12:
            raise DomainError(f"position {x} outside the closed unit ball")
        xi = sys.unit(x, np.asarray(direction, dtype=float))[0]
        return cls(x=x, xi=xi)

    def validate(self, sys: MagneticSystem, tol: float = 1e-10) -> None:
        if abs(sys.metric_norm(self.x, self.xi)[0] - 1.0) > tol:
            raise GeometryError("phase point is off the unit sphere bundle")
        if np.linalg.norm(self.x) > 1.0 + 1e-12:
            raise DomainError("phase point outside the closed domain")


@dataclass
class GeodesicPath:
    """Sampled magnetic geodesic through its full chord, with exit data.

    t runs from tau_minus to tau_plus with t = 0 at the seed point;
    entries (t_i, x_i, xi_i) sample the flow at the integrator step.
    """

    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    tau_minus: float
    tau_plus: float

    @property
    def tau(self) -> float:
        return self.tau_plus - self.tau_minus

    def state_at(self, time: float) -> tuple[np.ndarray, np.ndarray]:
        """Piecewise-linear lookup of (x, xi) at a path time."""
        if time < self.t[0] - 1e-9 or time > self.t[-1] + 1e-9:
            raise GeometryError("time outside path range")
        j = np.clip(np.searchsorted(self.t, time) - 1, 0, len(self.t) - 2)
        f = np.clip((time - self.t[j]) / max(self.t[j + 1] - self.t[j], 1e-300), 0.0, 1.0)
        return ((1 - f) * self.x[j] + f * self.x[j + 1],
                (1 - f) * self.xi[j] + f * self.xi[j + 1])


# -- core RK4 march -----------------------------------------------------

def _rk4_step(sys: MagneticSystem, x: np.ndarray, v: np.ndarray,
              h: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
    h = np.asarray(h, dtype=float)
    hc = h[:, None] if h.ndim else h
    k1x, k1v = v, sys._acceleration(x, v)
    k2x, k2v = v + 0.5 * hc * k1v, sys._acceleration(x + 0.5 * hc * k1x, v + 0.5 * hc * k1v)
    k3x, k3v = v + 0.5 * hc * k2v, sys._acceleration(x + 0.5 * hc * k2x, v + 0.5 * hc * k2v)
    k4x, k4v = v + hc * k3v, sys._acceleration(x + hc * k3x, v + hc * k3v)
    xn = x + hc / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = v + hc / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return xn, vn


def _renorm(sys: MagneticSystem, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return v / np.maximum(sys.metric_norm(x, v), 1e-300)[:, None]


@dataclass
class ExitSweep:
    """Batched exit data: per start point the positive duration to the
    boundary along the requested flow direction, the exit state, and
    (optionally) flow samples every quad_step plus the exact exit."""

    tdir: int
    tau: np.ndarray              # (N,) positive durations
    exit_x: np.ndarray           # (N, n)
    exit_xi: np.ndarray          # (N, n)
    trapped: np.ndarray          # (N,) bool
    counts: Optional[np.ndarray] = None    # samples per node
    ts: Optional[np.ndarray] = None        # (N, K) positive sample times
    xs: Optional[np.ndarray] = None        # (N, K, n)
    vs: Optional[np.ndarray] = None        # (N, K, n)


def trace_exit(sys: MagneticSystem, x0: np.ndarray, xi0: np.ndarray,
               tdir: int = 1, max_time: float = 12.0,
               quad_step: float = 0.0) -> ExitSweep:
    """March every trajectory to the boundary of the unit ball.

    tdir = +1 follows the flow, tdir = -1 integrates reversed time.
    With quad_step > 0, flow samples are recorded for later quadrature
    along the trajectories (first sample at t = 0, last at the exit).
    """
    x = np.array(np.atleast_2d(x0), dtype=float)
    v = np.array(np.atleast_2d(xi0), dtype=float)
    n_pts = x.shape[0]
    h = sys.step
    record = quad_step > 0.0
    every = max(1, int(round(quad_step / h))) if record else 0
    kmax = int(np.ceil(max_time / (every * h))) + 3 if record else 0

    tau = np.zeros(n_pts)
    exit_x = np.array(x)
    exit_v = np.array(v)
    done = np.zeros(n_pts, dtype=bool)
    if record:
        counts = np.zeros(n_pts, dtype=int)
        ts = np.zeros((n_pts, kmax))
        xs = np.zeros((n_pts, kmax, sys.dim))
        vs = np.zeros((n_pts, kmax, sys.dim))
        xs[:, 0] = x
        vs[:, 0] = v
        counts[:] = 1

    active = np.arange(n_pts)
    t_act = np.zeros(n_pts)
    max_steps = int(np.ceil(max_time / h)) + 1
    for istep in range(1, max_steps + 1):
        if active.size == 0:
            break
        xa, va = x[active], v[active]
        xn, vn = _rk4_step(sys, xa, va, tdir * h)
        vn = _renorm(sys, xn, vn)
        crossed = (xn * xn).sum(axis=1) >= 1.0
        if np.any(crossed):
            ids = active[crossed]
            xe, ve, dte = _bisect_exit(sys, xa[crossed], va[crossed], tdir, h)
            tau[ids] = t_act[ids] + dte
            exit_x[ids] = xe
            exit_v[ids] = ve
            done[ids] = True
            if record:
                _push_sample(counts, ts, xs, vs, ids, tau[ids], xe, ve)
        keep = ~crossed
        ids = active[keep]
        x[ids] = xn[keep]
        v[ids] = vn[keep]
        t_act[ids] += h
        if record and istep % every == 0 and ids.size:
            _push_sample(counts, ts, xs, vs, ids, t_act[ids], xn[keep], vn[keep])
        active = ids

    trapped = ~done
    if record:
        kused = counts.max() if n_pts else 0
        return ExitSweep(tdir=tdir, tau=tau, exit_x=exit_x, exit_xi=exit_v,
                         trapped=trapped, counts=counts, ts=ts[:, :kused],
                         xs=xs[:, :kused], vs=vs[:, :kused])
    return ExitSweep(tdir=tdir, tau=tau, exit_x=exit_x, exit_xi=exit_v,
                     trapped=trapped)


def _push_sample(counts, ts, xs, vs, ids, t, x, v) -> None:
    k = counts[ids]
    ts[ids, k] = t
    xs[ids, k] = x
    vs[ids, k] = v
    counts[ids] = k + 1


def _bisect_exit(sys: MagneticSystem, x0: np.ndarray, v0: np.ndarray,
                 tdir: int, h: float, iters: int = 42):
    """Bisection on the crossing step: find dt in (0, h] with |x(dt)| = 1."""
    lo = np.zeros(x0.shape[0])
    hi = np.full(x0.shape[0], h)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4_step(sys, x0, v0, tdir * mid)
        out = (xm * xm).sum(axis=1) >= 1.0
        hi = np.where(out, mid, hi)
        lo = np.where(out, lo, mid)
    dt = 0.5 * (lo + hi)
    xe, ve = _rk4_step(sys, x0, v0, tdir * dt)
    ve = _renorm(sys, xe, ve)
    return xe, ve, dt


# -- public geometry operations ------------------------------------------

def lorentz_force(sys: MagneticSystem, x, xi) -> np.ndarray:
    """Y_x(xi); raises DomainError outside the closed ball."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if np.any(np.linalg.norm(x2, axis=1) > 1.0 + 1e-12):
        raise DomainError("position outside the closed unit ball")
    out = sys.lorentz(x2, np.atleast_2d(np.asarray(xi, dtype=float)))
    return out[0] if single else out


def flow(sys: MagneticSystem, x, xi, time: float) -> tuple[np.ndarray, np.ndarray]:
    """phi_time(x, xi) for trajectories that stay inside the open ball."""
    x = np.array(np.atleast_2d(x), dtype=float)
    v = np.array(np.atleast_2d(xi), dtype=float)
    tdir = 1 if time >= 0 else -1
    remaining = abs(time)
    h = sys.step
    nfull = int(remaining / h)
    for _ in range(nfull):
        x, v = _rk4_step(sys, x, v, tdir * h)
        v = _renorm(sys, x, v)
        if np.any((x * x).sum(axis=1) >= 1.0):
            raise DomainError("flow left the domain before the requested time")
    rest = remaining - nfull * h
    if rest > 1e-15:
        x, v = _rk4_step(sys, x, v, tdir * rest)
        v = _renorm(sys, x, v)
    return x, v


def trace_geodesic(sys: MagneticSystem, start: PhasePoint, max_time: float = 12.0,
                   step: Optional[float] = None) -> GeodesicPath:
    """Forward trace from a phase point until the boundary (or max_time)."""
    return _path_trace(sys, start, max_time, forward_only=True)


def geodesic_through(sys: MagneticSystem, start: PhasePoint,
                     max_time: float = 12.0) -> GeodesicPath:
    """Full chord through a phase point, sampled from tau_minus to tau_plus."""
    return _path_trace(sys, start, max_time, forward_only=False)


def _path_trace(sys: MagneticSystem, start: PhasePoint, max_time: float,
                forward_only: bool) -> GeodesicPath:
    start.validate(sys, tol=1e-8)
    h = sys.step
    segs = {}
    for tdir in ((1,) if forward_only else (1, -1)):
        sw = trace_exit(sys, start.x, start.xi, tdir=tdir, max_time=max_time,
                        quad_step=h)
        if sw.trapped[0]:
            raise SimplicityError(
                f"no boundary crossing within max_time={max_time}; "
                "the system is not simple for this trajectory")
        k = sw.counts[0]
        segs[tdir] = (tdir * sw.ts[0, :k], sw.xs[0, :k], sw.vs[0, :k])
    t_f, x_f, v_f = segs[1]
    if forward_only:
        return GeodesicPath(t=t_f, x=x_f, xi=v_f, tau_minus=0.0,
                            tau_plus=float(t_f[-1]))
    t_b, x_b, v_b = segs[-1]
    order = np.argsort(t_b)
    t = np.concatenate([t_b[order][:-1], t_f])
    x = np.concatenate([x_b[order][:-1], x_f])
    v = np.concatenate([v_b[order][:-1], v_f])
    return GeodesicPath(t=t, x=x, xi=v, tau_minus=float(t[0]),
                        tau_plus=float(t[-1]))


def exit_times(sys: MagneticSystem, p: PhasePoint,
               max_time: float = 12.0) -> tuple[float, float]:
    """(tau_minus, tau_plus): signed exit times of the chord through p."""
    p.validate(sys, tol=1e-8)
    fw = trace_exit(sys, p.x, p.xi, tdir=1, max_time=max_time)
    bw = trace_exit(sys, p.x, p.xi, tdir=-1, max_time=max_time)
    if fw.trapped[0] or bw.trapped[0]:
        raise SimplicityError("trajectory trapped: no exit within max_time")
    return -float(bw.tau[0]), float(fw.tau[0])


def transport_along(sys: MagneticSystem, x0, xi0, v0, time: float) -> np.ndarray:
    """Parallel transport of v0 along the magnetic geodesic from (x0, xi0)
    for the given (signed) time: solves nabla_{gamma'} V = 0 with the same
    RK4 scheme, jointly with the trajectory."""
    x = np.array(np.atleast_2d(x0), dtype=float)
    w = np.array(np.atleast_2d(xi0), dtype=float)
    V = np.array(np.atleast_2d(v0), dtype=float)
    tdir = 1 if time >= 0 else -1
    h = sys.step
    remaining = abs(time)
    nfull = int(remaining / h)
    steps = [tdir * h] * nfull
    rest = remaining - nfull * h
    if rest > 1e-15:
        steps.append(tdir * rest)

    def rhs(state):
        x_, w_, V_ = state
        c = sys.conformal(x_)
        gc = sys.conformal_grad(x_)
        acc = sys._acceleration(x_, w_)
        gw = (gc * w_).sum(axis=1)[:, None]
        gV = (gc * V_).sum(axis=1)[:, None]
        wV = (w_ * V_).sum(axis=1)[:, None]
        dV = -(gw * V_ + gV * w_ - wV * gc) / (2.0 * c[:, None])
        return w_, acc, dV

    for hh in steps:
        s0 = (x, w, V)
        k1 = rhs(s0)
        k2 = rhs(tuple(s + 0.5 * hh * k for s, k in zip(s0, k1)))
        k3 = rhs(tuple(s + 0.5 * hh * k for s, k in zip(s0, k2)))
        k4 = rhs(tuple(s + hh * k for s, k in zip(s0, k3)))
        x, w, V = tuple(s + hh / 6.0 * (a + 2 * b + 2 * cc + d)
                        for s, a, b, cc, d in zip(s0, k1, k2, k3, k4))
        w = _renorm(sys, x, w)
    return V


def parallel_transport(sys: MagneticSystem, path: GeodesicPath, xi0, t: float) -> np.ndarray:
    """Transport xi0 from the path seed (its t = 0 point) to path time t."""
    if t < path.tau_minus - 1e-9 or t > path.tau_plus + 1e-9:
        raise GeometryError("transport time outside path range")
    x0, w0 = path.state_at(0.0)
    return transport_along(sys, x0, w0, xi0, t)[0]


# -- exponential map and shooting ----------------------------------------

def magnetic_exp(sys: MagneticSystem, x, t_xi) -> np.ndarray:
    """exp_x(t xi): flow position after time t = |t_xi|_g along t_xi/t."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(t_xi, dtype=float)
    t = float(sys.metric_norm(x, w)[0])
    if t < 1e-300:
        return np.array(x)
    xi = w / t
    sw = trace_exit(sys, x, xi, tdir=1, max_time=t + 1.0)
    if sw.tau[0] < t - 1e-12 and not sw.trapped[0]:
        raise DomainError("exp target lies outside the domain")
    pos, _ = flow(sys, x, xi, t)
    return pos[0]


def _dir_from_params(dim: int, p: np.ndarray) -> np.ndarray:
    if dim == 2:
        return np.stack([np.cos(p[:, 0]), np.sin(p[:, 0])], axis=1)
    st = np.sin(p[:, 0])
    return np.stack([st * np.cos(p[:, 1]), st * np.sin(p[:, 1]), np.cos(p[:, 0])], axis=1)


def magnetic_exp_inverse(sys: MagneticSystem, x, y, tol: float = 1e-8,
                         maxiter: int = 50) -> np.ndarray:
    """Damped Newton shooting for t*xi with exp_x(t xi) = y.

    On a simple system the solution is unique; failure to converge from
    the seed family raises ShootingError.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.linalg.norm(x) > 1 + 1e-12 or np.linalg.norm(y) > 1 + 1e-12:
        raise DomainError("shooting endpoints must lie in the closed ball")
    d = y - x
    dist = np.linalg.norm(d)
    if dist < 1e-14:
        return np.zeros_like(x)
    cmid = float(sys.conformal(np.atleast_2d(0.5 * (x + y)))[0])
    t0 = dist * np.sqrt(cmid)
    if sys.dim == 2:
        base = np.arctan2(d[1], d[0])
        seeds = [(base + da, t0 * ft)
                 for da in (0.0, 0.35, -0.35, 0.8, -0.8, 1.3, -1.3, 2.0, -2.0)
                 for ft in (1.0, 1.35)]
        params = [np.array([a, t]) for a, t in seeds]
    else:
        theta = np.arccos(np.clip(d[2] / dist, -1, 1))
        phi = np.arctan2(d[1], d[0])
        params = [np.array([theta + dt, phi + dp, t0 * ft])
                  for dt in (0.0, 0.3, -0.3, 0.7, -0.7)
                  for dp in (0.0, 0.3, -0.3, 0.8, -0.8)
                  for ft in (1.0, 1.3)]

    def residual(p):
        ang, t = p[:-1], abs(p[-1])
        xi = _dir_from_params(sys.dim, ang[None, :])[0]
        xi = xi / float(sys.metric_norm(x, xi)[0])
        try:
            pos, _ = flow(sys, x, xi, t)
        except DomainError:
            return None, None
        return pos[0] - y, xi

    for p in params:
        p = np.array(p, dtype=float)
        res, xi = residual(p)
        if res is None:
            continue
        ok = True
        for _ in range(maxiter):
            nr = np.linalg.norm(res)
            if nr < tol:
                break
            jac = np.zeros((sys.dim, sys.dim))
            hstep = 1e-6
            for j in range(sys.dim):
                dp = np.zeros_like(p)
                dp[j] = hstep
                rp, _ = residual(p + dp)
                if rp is None:
                    ok = False
                    break
                rm, _ = residual(p - dp)
                if rm is None:
                    ok = False
                    break
                jac[:, j] = (rp - rm) / (2 * hstep)
            if not ok:
                break
            try:
                dp_full = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                ok = False
                break
            lam = 1.0
            improved = False
            for _ in range(12):
                cand = p + lam * dp_full
                rc, xc = residual(cand)
                if rc is not None and np.linalg.norm(rc) < nr:
                    p, res, xi = cand, rc, xc
                    improved = True
                    break
                lam *= 0.5
            if not improved:
                ok = False
                break
        else:
            ok = False
        if ok and np.linalg.norm(res) < tol:
            t = abs(p[-1])
            return t * xi
    raise ShootingError(
        f"magnetic_exp_inverse failed to reach |residual| < {tol} "
        f"within {maxiter} iterations (non-simplicity or tolerance)")


def magnetic_distance(sys: MagneticSystem, x, y) -> float:
    """Length of the unit-speed magnetic geodesic from x through y.

    Not symmetric in general: the magnetic flow is irreversible unless
    the form vanishes.
    """
    w = magnetic_exp_inverse(sys, x, y)
    return float(sys.metric_norm(np.asarray(x, dtype=float), w)[0])


# -- simplicity diagnostics ----------------------------------------------

@dataclass
class SimplicityReport:
    convex_ok: bool
    min_convexity: float
    exp_ok: bool
    min_jacobian: float
    shooting_failures: int
    trapped_orbits: int
    margin: float

    @property
    def passed(self) -> bool:
        return self.convex_ok and self.exp_ok and self.trapped_orbits == 0


def simplicity_check(sys: MagneticSystem, n_boundary: int = 24,
                     n_interior: int = 12, margin: float = 1e-6,
                     max_time: float = 12.0) -> SimplicityReport:
    """Numerical diagnostic of the two simplicity hypotheses.

    (i) strict magnetic convexity: along boundary-tangential directions
    the second derivative of |x|^2 - 1 must exceed the margin (tangent
    geodesics immediately leave the closed ball);
    (ii) the exponential maps must be diffeomorphic on samples: shooting
    converges between interior sample pairs and the finite-difference
    Jacobian of exp stays nonsingular. Trapped orbits (no exit within
    max_time) are counted as failures.
    """
    dim = sys.dim
    # (i) convexity at boundary points over tangential directions
    if dim == 2:
        phis = np.linspace(0, 2 * np.pi, n_boundary, endpoint=False)
        xs = np.stack([np.cos(phis), np.sin(phis)], axis=1)
        tangents = [np.stack([-np.sin(phis), np.cos(phis)], axis=1)]
        tangents.append(-tangents[0])
    else:
        xs = _fibonacci_sphere(n_boundary)
        tangents = []
        for rot in range(8):
            ref = np.roll(np.eye(3)[0], rot % 3) if rot < 3 else _fibonacci_sphere(8)[rot - 3]
            tt = np.cross(xs, ref[None, :])
            norm = np.linalg.norm(tt, axis=1)
            good = norm > 1e-8
            tt[good] /= norm[good][:, None]
            tt[~good] = 0.0
            tangents.append(tt)
    worst = np.inf
    for tt in tangents:
        keep = np.linalg.norm(tt, axis=1) > 0.5
        x = xs[keep]
        v = sys.unit(x, tt[keep])
        acc = sys._acceleration(x, v)
        q = (v * v).sum(axis=1) + (x * acc).sum(axis=1)
        worst = min(worst, float(q.min()))
    convex_ok = worst > margin

    # (ii) trapped-orbit scan + shooting / Jacobian samples
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.8, 0.8, size=(n_interior, dim))
    pts *= np.minimum(1.0, 0.8 / np.maximum(np.linalg.norm(pts, axis=1), 1e-9))[:, None]
    dirs = sys.unit(pts, rng.normal(size=(n_interior, dim)))
    sw = trace_exit(sys, pts, dirs, tdir=1, max_time=max_time)
    trapped = int(sw.trapped.sum())

    failures = 0
    min_jac = np.inf
    if trapped == 0:
        for i in range(min(n_interior, 8)):
            a = pts[i]
            bpt = pts[(i + 1) % n_interior] * 0.9
            try:
                w = magnetic_exp_inverse(sys, a, bpt)
            except ShootingError:
                failures += 1
                continue
            h = 1e-5
            jac = np.zeros((dim, dim))
            for j in range(dim):
                dw = np.zeros(dim)
                dw[j] = h
                jac[:, j] = (magnetic_exp(sys, a, w + dw) -
                             magnetic_exp(sys, a, w - dw)) / (2 * h)
            min_jac = min(min_jac, abs(float(np.linalg.det(jac))))
    exp_ok = failures == 0 and trapped == 0 and (min_jac > margin or min_jac == np.inf)
    return SimplicityReport(convex_ok=convex_ok, min_convexity=worst,
                            exp_ok=exp_ok,
                            min_jacobian=float(min_jac if min_jac < np.inf else 1.0),
                            shooting_failures=failures, trapped_orbits=trapped,
                            margin=margin)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
