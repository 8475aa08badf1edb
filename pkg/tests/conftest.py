"""Shared fixtures: systems, grids and workspaces are expensive to
build (batched geodesic sweeps), so they are session scoped and shared
across test modules. Tests must not mutate them."""

import numpy as np
import pytest

from mrtlab import geometry as geo
from mrtlab import phase_space as ps
from mrtlab import transport as tr


@pytest.fixture(scope="session")
def sys_flat():
    return geo.flat_disk()


@pytest.fixture(scope="session")
def sys_b03():
    return geo.flat_disk(b=0.3)


@pytest.fixture(scope="session")
def sys_b05():
    return geo.flat_disk(b=0.5)


@pytest.fixture(scope="session")
def sys_conformal():
    c = lambda x: 1.0 + 0.2 * (np.atleast_2d(x) ** 2).sum(axis=1)
    gc = lambda x: 0.4 * np.atleast_2d(x)
    return geo.make_system(2, c, gc, b=0.2, descriptor="conformal02_b02")


@pytest.fixture(scope="session")
def sys_ball():
    return geo.flat_ball(bz=0.2)


@pytest.fixture(scope="session")
def grid_flat(sys_flat):
    return ps.build_sm_grid(sys_flat, spatial=(8, 20), fiber=(16,))


@pytest.fixture(scope="session")
def grid_b03(sys_b03):
    return ps.build_sm_grid(sys_b03, spatial=(8, 20), fiber=(16,))


@pytest.fixture(scope="session")
def ws_flat(sys_flat, grid_flat):
    bp = ps.build_boundary_grid(sys_flat, "+", (40,), (24,))
    bm = ps.build_boundary_grid(sys_flat, "-", (40,), (24,))
    return tr.Workspace(sys_flat, grid_flat, bgrid_in=bp, bgrid_out=bm)


@pytest.fixture(scope="session")
def ws_b03(sys_b03, grid_b03):
    bp = ps.build_boundary_grid(sys_b03, "+", (40,), (24,))
    bm = ps.build_boundary_grid(sys_b03, "-", (40,), (24,))
    return tr.Workspace(sys_b03, grid_b03, bgrid_in=bp, bgrid_out=bm)


@pytest.fixture(scope="session")
def ws_ball(sys_ball):
    grid = ps.build_sm_grid(sys_ball, spatial=(4, 4, 8), fiber=(4, 8))
    bp = ps.build_boundary_grid(sys_ball, "+", (6, 12), (3, 6))
    bm = ps.build_boundary_grid(sys_ball, "-", (6, 12), (3, 6))
    return tr.Workspace(sys_ball, grid, bgrid_in=bp, bgrid_out=bm)


def gaussian_a(center, amp, width, radius=0.9):
    center = np.asarray(center, dtype=float)

    def a(x, xi=None):
        x = np.atleast_2d(x)
        core = amp * np.exp(-((x - center[: x.shape[1]]) ** 2).sum(axis=1)
                            / (2 * width ** 2))
        return core * (np.linalg.norm(x, axis=1) <= radius)

    return a
