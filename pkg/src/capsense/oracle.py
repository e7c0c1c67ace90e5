"""Independent reference values: analytic formulas and brute-force quadrature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, EvaluationError
from .geometry import ParametricSurface, Profile, build_quadrature, perturb_surface
from .solver import solve_equilibrium

__all__ = [
    "AnalyticReference",
    "REFERENCES",
    "sphere_capacity",
    "ellipsoid_capacity",
    "ellipsoid_capacity_midpoint",
    "sphere_exterior_field",
    "fd_capacity_derivative",
    "sphere_np_eigenvalue",
]


@dataclass(frozen=True)
class AnalyticReference:
    """A named closed-form reference with its domain of validity."""

    name: str
    evaluate: Callable
    domain: str


def _positive(*vals):
    if any(not (math.isfinite(v) and v > 0) for v in vals):
        raise ConfigurationError("sizes must be positive and finite")


def sphere_capacity(R: float) -> float:
    """Capacity of the ball of radius R (the potential is R/|x|)."""
    _positive(R)
    return float(R)


def _ellipsoid_integrand(t, a, b, c):
    # s = tan(t)^2 maps [0, inf) to [0, pi/2); ds = 2 tan(t) sec(t)^2 dt
    s = math.tan(t) ** 2
    jac = 2.0 * math.tan(t) / math.cos(t) ** 2
    return jac / math.sqrt((a * a + s) * (b * b + s) * (c * c + s))


def ellipsoid_capacity(a: float, b: float, c: float) -> float:
    """``2 / int_0^inf ds / sqrt((a^2+s)(b^2+s)(c^2+s))`` by adaptive quadrature."""
    _positive(a, b, c)
    val, _ = integrate.quad(_ellipsoid_integrand, 0.0, math.pi / 2, args=(a, b, c), epsabs=1e-10, epsrel=1e-12, limit=200)
    return 2.0 / val


def ellipsoid_capacity_midpoint(a: float, b: float, c: float, tol: float = 1e-11) -> float:
    """Same integral by composite midpoint rule, tripling the node count until
    successive values agree to ``tol`` (second, independent rule)."""
    _positive(a, b, c)

    def f(t):
        s = np.tan(t) ** 2
        return 2.0 * np.tan(t) / np.cos(t) ** 2 / np.sqrt((a * a + s) * (b * b + s) * (c * c + s))

    n, prev = 81, None
    while True:
        h = (math.pi / 2) / n
        val = h * float(np.sum(f((np.arange(n) + 0.5) * h)))
        if prev is not None and abs(val - prev) < tol:
            return 2.0 / val
        if n > 3**15:
            raise EvaluationError("midpoint refinement did not converge")
        prev, n = val, 3 * n


def sphere_exterior_field(R: float, x):
    """Equilibrium potential ``R/|x|`` of the ball and its gradient."""
    _positive(R)
    x = np.asarray(x, dtype=float)
    r = float(np.linalg.norm(x))
    if r <= R:
        raise EvaluationError("point is not exterior to the sphere")
    return R / r, -R * x / r**3


def fd_capacity_derivative(surface: ParametricSurface, profile: Profile, delta: float = 1e-2, resolution: int = 64) -> float:
    """Central difference ``(cap(+delta) - cap(-delta)) / (2 delta)`` of re-solved capacities."""
    if not (math.isfinite(delta) and delta > 0):
        raise ConfigurationError("delta must be positive")
    if profile.is_zero:
        return 0.0
    caps = []
    for d in (delta, -delta):
        q = build_quadrature(perturb_surface(surface, profile, d), resolution)
        caps.append(solve_equilibrium(q).capacity)
        q._cache.clear()
    return (caps[0] - caps[1]) / (2.0 * delta)


def sphere_np_eigenvalue(l: int) -> float:
    """Eigenvalue ``1/(2(2l+1))`` of K* on any sphere (multiplicity 2l+1)."""
    if int(l) != l or l < 0:
        raise ConfigurationError("l must be a non-negative integer")
    return 1.0 / (2.0 * (2 * int(l) + 1))


REFERENCES = {
    "sphere_capacity": AnalyticReference("sphere_capacity", sphere_capacity, "R > 0"),
    "ellipsoid_capacity": AnalyticReference("ellipsoid_capacity", ellipsoid_capacity, "a, b, c > 0"),
    "sphere_exterior_field": AnalyticReference("sphere_exterior_field", sphere_exterior_field, "|x| > R"),
    "sphere_np_eigenvalue": AnalyticReference("sphere_np_eigenvalue", sphere_np_eigenvalue, "integer l >= 0"),
}
