"""Declarative scenario files.

A scenario is a single YAML document with nested sections (system,
coefficients, grids, run, output). Field values are expression strings
over chart coordinates (x1..x3, r), directions (xi*, eta*) and, for
kernels, cos_theta. Unknown keys are rejected; every run embeds the
scenario hash in its outputs so downstream commands can verify that an
artifact was produced by the same configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import FORMAT_VERSION
from .expressions import Expression, kernel_function, phase_function, position_function
from .geometry import MagneticSystem, make_system
from .phase_space import BoundaryGrid, SphereBundleGrid, build_boundary_grid, build_sm_grid
from .transport import AdmissiblePair, Workspace


class ScenarioError(ValueError):
    pass


_SCHEMA = {
    "format_version": None,
    "name": None,
    "system": {"dimension", "conformal_factor", "magnetic", "integrator_step"},
    "coefficients": {"a", "k", "support_margin"},
    "grids": {"spatial", "fiber", "boundary_positions", "boundary_directions",
              "eps_graze", "quad_step"},
    "run": None,          # command specific, free-form scalar map
    "output": {"dir", "formats"},
}

_MAGNETIC_KEYS = {"b", "m"}


def _check_keys(doc: dict) -> None:
    for key, val in doc.items():
        if key not in _SCHEMA:
            raise ScenarioError(f"unknown top-level key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(val, dict):
            raise ScenarioError(f"section {key!r} must be a mapping")
        for sub in val:
            if sub not in allowed:
                raise ScenarioError(f"unknown key {key}.{sub}")
    mag = doc.get("system", {}).get("magnetic")
    if isinstance(mag, dict):
        for sub in mag:
            if sub not in _MAGNETIC_KEYS:
                raise ScenarioError(f"unknown key system.magnetic.{sub}")


@dataclass
class Scenario:
    doc: dict
    path: str = ""

    @classmethod
    def load(cls, path: str, overrides: Optional[list[str]] = None) -> "Scenario":
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, dict):
            raise ScenarioError("scenario must be a YAML mapping")
        for item in overrides or []:
            if "=" not in item:
                raise ScenarioError(f"override {item!r} is not key=value")
            key, val = item.split("=", 1)
            node = doc
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = yaml.safe_load(val)
        _check_keys(doc)
        if doc.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ScenarioError("unsupported scenario format_version")
        return cls(doc=doc, path=path)

    # -- accessors -------------------------------------------------------
    @property
    def run(self) -> dict:
        return self.doc.get("run", {}) or {}

    @property
    def output(self) -> dict:
        return self.doc.get("output", {}) or {}

    def hash(self) -> str:
        text = json.dumps(self.doc, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def dimension(self) -> int:
        return int(self.doc.get("system", {}).get("dimension", 2))

    def build_system(self) -> MagneticSystem:
        sysdoc = self.doc.get("system", {})
        dim = self.dimension()
        cf = str(sysdoc.get("conformal_factor", "1"))
        step = float(sysdoc.get("integrator_step", 2e-3))
        mag = sysdoc.get("magnetic", {}) or {}
        conformal = position_function(cf) if cf.strip() != "1" else 1.0
        b = None
        m = None
        if dim == 2 and "b" in mag:
            btxt = str(mag["b"])
            try:
                b = float(btxt)
            except ValueError:
                b = position_function(btxt)
        if dim == 3 and "m" in mag:
            comps = [position_function(str(t)) for t in mag["m"]]

            def m(x):
                x = np.atleast_2d(x)
                return np.stack([c(x) for c in comps], axis=1)

        return make_system(dim, conformal=conformal, b=b, m=m, step=step,
                           descriptor=f"scenario:{self.hash()}")

    def build_pair(self) -> AdmissiblePair:
        coef = self.doc.get("coefficients", {}) or {}
        margin = float(coef.get("support_margin", 0.1))
        a_txt = str(coef.get("a", "0"))
        a_fn = phase_function(a_txt)
        k_fn = None
        if coef.get("k") not in (None, "0", 0):
            k_fn = kernel_function(str(coef["k"]))
        return AdmissiblePair(a=a_fn, k=k_fn, support_margin=margin,
                              label=f"scenario:{self.hash()}")

    def grid_spec(self) -> dict:
        g = dict(self.doc.get("grids", {}) or {})
        dim = self.dimension()
        defaults = {
            2: {"spatial": [8, 20], "fiber": [16], "boundary_positions": [48],
                "boundary_directions": [32]},
            3: {"spatial": [4, 4, 8], "fiber": [4, 8],
                "boundary_positions": [6, 12], "boundary_directions": [3, 6]},
        }[dim]
        for key, val in defaults.items():
            g.setdefault(key, val)
        g.setdefault("eps_graze", 1e-3)
        g.setdefault("quad_step", 0.02)
        return g

    def build_grids(self, sys: MagneticSystem
                    ) -> tuple[SphereBundleGrid, BoundaryGrid, BoundaryGrid]:
        g = self.grid_spec()
        grid = build_sm_grid(sys, tuple(g["spatial"]), tuple(g["fiber"]))
        bp = build_boundary_grid(sys, "+", tuple(g["boundary_positions"]),
                                 tuple(g["boundary_directions"]),
                                 eps_graze=float(g["eps_graze"]))
        bm = build_boundary_grid(sys, "-", tuple(g["boundary_positions"]),
                                 tuple(g["boundary_directions"]),
                                 eps_graze=float(g["eps_graze"]))
        return grid, bp, bm

    def build_workspace(self, sys: Optional[MagneticSystem] = None) -> Workspace:
        sys = sys or self.build_system()
        grid, bp, bm = self.build_grids(sys)
        return Workspace(sys, grid, bgrid_in=bp, bgrid_out=bm,
                         quad_step=float(self.grid_spec()["quad_step"]))
