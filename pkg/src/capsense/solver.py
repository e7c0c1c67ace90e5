"""Equilibrium density, capacity, exterior Dirichlet problem and far field.

The equilibrium density solves the first-kind equation ``S[phi0] = 1`` and
equals ``du/dn`` of the equilibrium potential ``u`` (``u = 1`` on the
surface, ``u -> 0`` at infinity).  The capacity is the Gauss integral
``cap = -(1/4pi) int phi0 dsigma``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import ConditioningError, ConditioningWarning, RadiusTooSmallError
from .geometry import SurfaceQuadrature
from .potential import (
    assemble_K,
    eval_double_layer,
    eval_single_layer,
    single_layer_lu,
)

__all__ = [
    "EquilibriumSolution",
    "DirichletSolution",
    "solve_equilibrium",
    "solve_exterior_dirichlet",
    "eval_potential",
    "far_field_coefficient",
    "condition_estimate",
    "FAR_FIELD_DIRECTIONS",
    "WARN_CONDITION",
    "MAX_CONDITION",
]

WARN_CONDITION = 1e8
MAX_CONDITION = 1e12

FAR_FIELD_DIRECTIONS = np.array(
    [d for d in itertools.product((-1, 0, 1), repeat=3) if any(d)], dtype=float
)
FAR_FIELD_DIRECTIONS /= np.linalg.norm(FAR_FIELD_DIRECTIONS, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    """Equilibrium density ``phi0 = du/dn`` and the capacity."""

    density: np.ndarray
    capacity: float
    quadrature: SurfaceQuadrature
    condition: float

    def potential(self, x, check: bool = True):
        return eval_single_layer(self.quadrature, self.density, x, check=check)


@dataclass(frozen=True, eq=False)
class DirichletSolution:
    """Exterior Dirichlet solution ``w = S[phi] - D[f]`` with ``phi = dw/dn``."""

    boundary_data: np.ndarray
    density: np.ndarray
    quadrature: SurfaceQuadrature
    condition: float

    def potential(self, x, check: bool = True):
        q = self.quadrature
        return eval_single_layer(q, self.density, x, check=check) - eval_double_layer(
            q, self.boundary_data, x, check=check
        )


def condition_estimate(quadrature: SurfaceQuadrature) -> float:
    """LAPACK 1-norm condition estimate of the single-layer matrix.

    Warns above ``WARN_CONDITION`` and raises :class:`ConditioningError`
    above ``MAX_CONDITION``.
    """
    cache = quadrature._cache
    if "S_cond" not in cache:
        (lu, _piv), anorm = single_layer_lu(quadrature)
        rcond, info = lapack.dgecon(lu, anorm, norm="1")
        cache["S_cond"] = math.inf if rcond == 0 or info != 0 else 1.0 / rcond
    cond = cache["S_cond"]
    if cond > MAX_CONDITION:
        raise ConditioningError(f"single-layer system is singular to working precision (cond ~ {cond:.3g})", cond)
    if cond > WARN_CONDITION:
        warnings.warn(f"single-layer condition number {cond:.3g} exceeds {WARN_CONDITION:g}", ConditioningWarning)
    return cond


def _solve(quadrature: SurfaceQuadrature, rhs: np.ndarray) -> np.ndarray:
    lu, _ = single_layer_lu(quadrature)
    return sla.lu_solve(lu, rhs, check_finite=False)


def solve_equilibrium(quadrature: SurfaceQuadrature) -> EquilibriumSolution:
    """Solve ``S[phi0] = 1`` by dense LU and return ``phi0`` with the capacity."""
    if "equilibrium" not in quadrature._cache:
        cond = condition_estimate(quadrature)
        phi0 = _solve(quadrature, np.ones(quadrature.size))
        cap = -float(np.sum(phi0 * quadrature.weights)) / (4.0 * math.pi)
        quadrature._cache["equilibrium"] = EquilibriumSolution(phi0, cap, quadrature, cond)
    return quadrature._cache["equilibrium"]


def solve_exterior_dirichlet(quadrature: SurfaceQuadrature, boundary_data) -> DirichletSolution:
    """Exterior Dirichlet problem with data ``f`` via ``S[phi] = (1/2 + K) f``."""
    f = np.array(quadrature.check(boundary_data, "boundary data"), dtype=float)
    cond = condition_estimate(quadrature)
    if not np.any(f):
        return DirichletSolution(f, np.zeros_like(f), quadrature, cond)
    rhs = 0.5 * f + assemble_K(quadrature).entries @ f
    return DirichletSolution(f, _solve(quadrature, rhs), quadrature, cond)


def eval_potential(solution, x):
    """Potential of an equilibrium or Dirichlet solution at exterior point(s)."""
    return solution.potential(x)


def far_field_coefficient(solution, sample_radius: float) -> float:
    """Mean of ``|x| u(x)`` over the 26 directions of the ``{-1,0,1}^3`` stencil.

    ``sample_radius`` must be at least 50 times the largest distance from the
    origin to the surface.
    """
    q = solution.quadrature
    rmin = 50.0 * q.circumradius
    if not sample_radius >= rmin:
        raise RadiusTooSmallError(f"sample radius {sample_radius:g} below the minimum {rmin:g}")
    pts = sample_radius * FAR_FIELD_DIRECTIONS
    return float(np.mean(sample_radius * np.asarray(solution.potential(pts))))
