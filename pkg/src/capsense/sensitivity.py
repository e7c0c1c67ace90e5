"""First-order shape-sensitivity formulas and their re-solve validation.

For a normal perturbation ``x -> x + eps h(x) n(x)`` of the boundary, with
``phi0 = du/dn`` the equilibrium density and ``v`` the exterior harmonic
corrector with boundary data ``-h phi0``:

* current:    ``du_eps/dn~ o Psi = phi0 + eps (2 tau h phi0 + dv/dn) + O(eps^2)``
* capacity:   ``cap(eps) = cap + eps T1``, ``T1 = (1/4pi) int h phi0^2``
* far field:  ``u_eps(x) = u(x) + eps T1 / |x| + ...``
* NP eigenvector (eigenvalue 1/2), normalized ``varphi0 = phi0/||phi0||``:
  ``varphi0 + 2 eps tau h varphi0 + eps vt - eps <tau h varphi0 + vt, varphi0> varphi0``
  with ``vt = (dv/dn)/||phi0||``, and the pairing
  ``int (varphi_eps o Psi - varphi0) varphi0 = eps int tau h varphi0^2 + O(eps^2)``.

The perturbed surface reuses the parameter nodes of the base surface, so
pulling a density back from the perturbed surface is the identity on node
indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, EigensolveError, QuadratureMismatchError, RadiusTooSmallError
from .geometry import (
    ParametricSurface,
    PerturbationField,
    Profile,
    SurfaceQuadrature,
    build_quadrature,
    perturb_surface,
    perturbation_field,
    resample,
)
from .potential import assemble_Kstar, assemble_S
from .solver import (
    DirichletSolution,
    EquilibriumSolution,
    far_field_coefficient,
    solve_equilibrium,
    solve_exterior_dirichlet,
)

__all__ = [
    "CorrectorSolution",
    "ExpansionReport",
    "STUDY_KINDS",
    "DEFAULT_EPS",
    "solve_corrector",
    "predict_current",
    "capacity_first_order",
    "predict_farfield",
    "np_first_eigenvector",
    "eigen_residual",
    "predict_eigenvector",
    "perturbed_equilibrium",
    "ground_truth_eigenvector",
    "eigenvector_pairing",
    "np_spectrum_check",
    "spectrum_verdict",
    "discretization_floor",
    "fit_order",
    "run_expansion_study",
    "operator_order_study",
]

STUDY_KINDS = ("current", "capacity", "farfield", "eigenvector", "pairing", "density")
DEFAULT_EPS = (0.02, 0.04, 0.08)
FLOOR_FACTOR = 10.0


@dataclass(frozen=True, eq=False)
class CorrectorSolution:
    """Exterior corrector ``v`` with data ``-h phi0`` and its normal derivative."""

    dirichlet: DirichletSolution
    normal_derivative: np.ndarray

    @property
    def boundary_data(self) -> np.ndarray:
        return self.dirichlet.boundary_data

    def potential(self, x):
        return self.dirichlet.potential(x)


def _same(eq: EquilibriumSolution, fld: PerturbationField):
    if fld.quadrature is not eq.quadrature:
        raise QuadratureMismatchError("perturbation field and equilibrium live on different quadratures")


def solve_corrector(eq: EquilibriumSolution, fld: PerturbationField) -> CorrectorSolution:
    """Solve the exterior Dirichlet problem with data ``-h phi0``."""
    _same(eq, fld)
    ds = solve_exterior_dirichlet(eq.quadrature, -fld.h * eq.density)
    return CorrectorSolution(ds, ds.density)


def predict_current(eq: EquilibriumSolution, corrector: CorrectorSolution, fld: PerturbationField, eps: float):
    """First-order prediction of the perturbed current pulled back to the base nodes."""
    _same(eq, fld)
    q = eq.quadrature
    if fld.is_zero or eps == 0:
        return eq.density.copy()
    return eq.density + eps * (2.0 * q.tau * fld.h * eq.density + corrector.normal_derivative)


def capacity_first_order(eq: EquilibriumSolution, fld: PerturbationField) -> float:
    """``T1 = (1/4pi) sum h phi0^2 w``; ``cap(eps) ~ cap + eps T1``."""
    _same(eq, fld)
    if fld.is_zero:
        return 0.0
    return float(np.sum(fld.h * eq.density**2 * eq.quadrature.weights)) / (4.0 * math.pi)


def predict_farfield(eq: EquilibriumSolution, fld: PerturbationField, eps: float, x) -> float:
    """``u(x) + eps T1/|x|`` at a far exterior point (``|x| >= 50 R_max``)."""
    x = np.asarray(x, dtype=float)
    r = float(np.linalg.norm(x))
    rmin = 50.0 * eq.quadrature.circumradius
    if not r >= rmin:
        raise RadiusTooSmallError(f"|x| = {r:g} is below the far-field minimum {rmin:g}")
    return float(eq.potential(x)) + eps * capacity_first_order(eq, fld) / r


def np_first_eigenvector(eq: EquilibriumSolution) -> np.ndarray:
    """Normalized equilibrium density, the K* eigenvector for eigenvalue 1/2."""
    return eq.density / eq.quadrature.norm(eq.density)


def eigen_residual(quadrature: SurfaceQuadrature, vector, value: float = 0.5) -> float:
    """Relative weighted residual ``||K* v - value v|| / ||v||``."""
    v = quadrature.check(vector)
    Ks = assemble_Kstar(quadrature).entries
    return quadrature.norm(Ks @ v - value * v) / quadrature.norm(v)


def predict_eigenvector(eq: EquilibriumSolution, corrector: CorrectorSolution, fld: PerturbationField, eps: float):
    """First-order prediction of the perturbed normalized eigenvector (pulled back)."""
    _same(eq, fld)
    q = eq.quadrature
    nrm = q.norm(eq.density)
    base = eq.density / nrm
    if fld.is_zero or eps == 0:
        return base
    vt = corrector.normal_derivative / nrm
    th = q.tau * fld.h
    proj = q.inner(th * base + vt, base)
    return base + eps * (2.0 * th * base + vt - proj * base)


def perturbed_equilibrium(eq: EquilibriumSolution, profile: Profile, eps: float) -> EquilibriumSolution:
    """Equilibrium solution on the perturbed surface, same parameter nodes."""
    q = eq.quadrature
    key = ("perturbed", profile.coefficients, float(eps))
    if key not in q._cache:
        surf = perturb_surface(q.surface, profile, eps)
        q._cache[key] = solve_equilibrium(build_quadrature(surf, q.resolution))
    return q._cache[key]


def ground_truth_eigenvector(eq: EquilibriumSolution, profile: Profile, eps: float, reference=None) -> np.ndarray:
    """Perturbed eigen-density normalized on the perturbed surface, pulled back.

    Its sign is chosen so that the base-weighted inner product with
    ``reference`` (default: the unperturbed eigenvector) is positive.
    """
    pe = perturbed_equilibrium(eq, profile, eps)
    vec = pe.density / pe.quadrature.norm(pe.density)
    ref = np_first_eigenvector(eq) if reference is None else reference
    if eq.quadrature.inner(vec, ref) < 0:
        vec = -vec
    return vec


def eigenvector_pairing(eq: EquilibriumSolution, fld: PerturbationField, eps: float):
    """``(lhs, rhs)`` of the eigenvector pairing identity.

    ``lhs = sum (varphi_eps o Psi - varphi0) varphi0 w`` with base weights and
    ``rhs = eps sum tau h varphi0^2 w``.
    """
    _same(eq, fld)
    if fld.is_zero or eps == 0:
        return 0.0, 0.0
    q = eq.quadrature
    base = np_first_eigenvector(eq)
    truth = ground_truth_eigenvector(eq, fld.profile, eps)
    lhs = q.inner(truth - base, base)
    rhs = eps * q.inner(q.tau * fld.h * base, base)
    return lhs, rhs


def np_spectrum_check(quadrature: SurfaceQuadrature, count: int) -> np.ndarray:
    """The ``count`` largest-magnitude eigenvalues of the discrete K*.

    When K* is self-adjoint in the weighted inner product (the sphere), the
    problem is symmetrized with ``W^(1/2) K* W^(-1/2)``; otherwise a
    nonsymmetric Arnoldi solve is used.  Values are returned in descending
    order.
    """
    N = quadrature.size
    if not 1 <= count <= N:
        raise ConfigurationError("count must lie between 1 and the node count")
    Ks = assemble_Kstar(quadrature).entries
    sw = np.sqrt(quadrature.weights)
    A = sw[:, None] * Ks / sw[None, :]
    asym = np.max(np.abs(A - A.T)) / np.max(np.abs(A))
    v0 = np.ones(N) / math.sqrt(N)
    ncv = min(N, max(2 * count + 1, 40))
    try:
        if asym < 1e-10:
            A = 0.5 * (A + A.T)
            if count >= N - 1:
                vals = np.linalg.eigvalsh(A)
            else:
                vals = spla.eigsh(A, k=count, which="LM", v0=v0, ncv=ncv, return_eigenvectors=False)
        else:
            if count >= N - 1:
                vals = np.linalg.eigvals(Ks)
            else:
                vals = spla.eigs(Ks, k=count, which="LM", v0=v0, ncv=ncv, return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:  # pragma: no cover - solver failure path
        raise EigensolveError(str(exc)) from exc
    vals = np.real_if_close(vals, tol=1e6)
    if np.iscomplexobj(vals):
        raise EigensolveError("K* produced complex eigenvalues in the requested range")
    vals = np.asarray(vals, dtype=float)
    vals = vals[np.argsort(-np.abs(vals), kind="stable")][:count]
    return np.sort(vals)[::-1]


def spectrum_verdict(values, tol: float = 1e-3) -> dict:
    """Check ``max = 1/2`` (within ``tol``) and every other value inside ``(-1/2, 1/2)``."""
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    top_ok = abs(v[0] - 0.5) <= tol
    rest = v[1:]
    inside = bool(np.all(np.abs(rest) < 0.5 - tol)) if len(rest) else True
    return {"top": float(v[0]), "top_ok": bool(top_ok), "interior_ok": inside}


# ---------------------------------------------------------------------------
# Residual-order machinery
# ---------------------------------------------------------------------------


def fit_order(eps, residuals, floor: float = 0.0, factor: float = FLOOR_FACTOR):
    """Least-squares slope of ``log|r|`` against ``log eps``.

    Residuals below ``factor * floor`` are excluded.  Returns
    ``(slope, intercept, used)``; slope and intercept are NaN when fewer than
    two points remain.
    """
    e = np.asarray(eps, dtype=float)
    r = np.abs(np.asarray(residuals, dtype=float))
    used = (r > factor * floor) & (r > 0)
    if used.sum() < 2:
        return math.nan, math.nan, used
    slope, intercept = np.polyfit(np.log(e[used]), np.log(r[used]), 1)
    return float(slope), float(intercept), used


_FLOORS: dict = {}


def _self_error(a_lo, q_lo, a_hi, q_hi):
    try:
        return q_lo.norm(a_lo - resample(a_hi, q_hi, q_lo))
    except NotImplementedError:
        return abs(q_lo.norm(a_lo) - q_hi.norm(a_hi))


def discretization_floor(
    surface: ParametricSurface, kind: str, resolution: int, high_resolution: int | None = None, radius: float = 1.0
) -> float:
    """Self-error of the unperturbed quantity between two resolutions.

    ``capacity`` and ``farfield`` compare capacities (the latter divided by
    the sampling radius); ``current`` and ``density`` compare ``phi0`` and
    ``eigenvector``/``pairing`` compare the normalized ``phi0`` in the
    weighted L2 norm after spectral resampling.  The default high resolution
    is ``1.5 * resolution`` (64 -> 96).
    """
    n_hi = high_resolution or 2 * int(round(0.75 * resolution))
    group = {"farfield": "capacity", "density": "current", "pairing": "eigenvector"}.get(kind, kind)
    if group not in ("capacity", "current", "eigenvector"):
        raise ConfigurationError(f"no floor rule for {kind!r}")
    key = (surface.key, resolution, n_hi)
    if key not in _FLOORS:
        q_lo = build_quadrature(surface, resolution)
        q_hi = build_quadrature(surface, n_hi)
        e_lo, e_hi = solve_equilibrium(q_lo), solve_equilibrium(q_hi)
        _FLOORS[key] = {
            "capacity": abs(e_lo.capacity - e_hi.capacity),
            "current": _self_error(e_lo.density, q_lo, e_hi.density, q_hi),
            "eigenvector": _self_error(np_first_eigenvector(e_lo), q_lo, np_first_eigenvector(e_hi), q_hi),
        }
        q_hi._cache.clear()
    val = float(_FLOORS[key][group])
    return val / radius if kind == "farfield" else val


@dataclass
class ExpansionReport:
    """Predicted vs re-solved quantities over an eps sweep."""

    kind: str
    eps: list
    predicted: list
    truth: list
    residuals: list
    slope: float
    intercept: float
    floor: float
    used: list
    verdict: str
    expected_order: float
    order_tolerance: float
    extra: dict = field(default_factory=dict)

    @property
    def table(self):
        columns = ("eps", "predicted", "truth", "residual")
        return columns, [list(row) for row in zip(self.eps, self.predicted, self.truth, self.residuals)]

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            return x

        return {
            "kind": self.kind,
            "eps": list(self.eps),
            "predicted": [clean(float(v)) for v in self.predicted],
            "truth": [clean(float(v)) for v in self.truth],
            "residuals": [clean(float(v)) for v in self.residuals],
            "slope": clean(self.slope),
            "intercept": clean(self.intercept),
            "floor": self.floor,
            "used_in_fit": [bool(u) for u in self.used],
            "verdict": self.verdict,
            "expected_order": self.expected_order,
            "order_tolerance": self.order_tolerance,
            "extra": self.extra,
        }


def _validate_eps(eps_list) -> list:
    eps = [float(e) for e in eps_list]
    if not eps:
        raise ConfigurationError("the eps list is empty")
    if any(not (math.isfinite(e) and e > 0) for e in eps):
        raise ConfigurationError("eps values must be positive and finite")
    return eps


def _slope_verdict(slope, used, expected, tol, at_least=False):
    if np.sum(used) < 2:
        return "floor-limited"
    if at_least:
        return "pass" if slope >= expected - tol else "fail"
    return "pass" if abs(slope - expected) <= tol else "fail"


def run_expansion_study(
    kind: str,
    surface: ParametricSurface,
    profile: Profile,
    eps_list: Sequence[float] = DEFAULT_EPS,
    resolution: int = 64,
    *,
    radius: float | None = None,
    direction=(1.0, 1.0, 1.0),
    floor: float | None = None,
    floor_resolution: int | None = None,
    order_tolerance: float = 0.3,
) -> ExpansionReport:
    """Re-solve on each perturbed surface and compare with the first-order formula.

    Parameters
    ----------
    kind
        One of ``current``, ``capacity``, ``farfield``, ``eigenvector``,
        ``pairing`` or ``density`` (the first-order stability estimate
        ``||phi_eps o Psi - phi0|| = O(eps)``).
    radius
        Far-field sampling radius (``farfield`` only); defaults to
        100 times the largest distance from the origin to the surface.
    floor
        Discretization floor; estimated with :func:`discretization_floor`
        when omitted.

    Returns
    -------
    ExpansionReport
        Slope verdicts use ``expected +- order_tolerance`` (expected order 2,
        or slope ``>= 0.9`` for ``density``).  ``farfield`` is judged by the
        bound ``|residual| <= 2 (eps^2/|x| + eps/|x|^2)``.
    """
    if kind not in STUDY_KINDS:
        raise ConfigurationError(f"unknown study kind {kind!r}")
    eps = _validate_eps(eps_list)
    q = build_quadrature(surface, resolution)
    eq = solve_equilibrium(q)
    fld = perturbation_field(q, profile)
    x = None
    if kind == "farfield":
        r = radius if radius is not None else 100.0 * q.circumradius
        d = np.asarray(direction, dtype=float)
        x = r * d / np.linalg.norm(d)
    if floor is None:
        floor = discretization_floor(
            surface, kind, resolution, floor_resolution, radius=float(np.linalg.norm(x)) if x is not None else 1.0
        )
    corrector = solve_corrector(eq, fld) if kind in ("current", "eigenvector") else None
    base_vec = np_first_eigenvector(eq)
    T1 = capacity_first_order(eq, fld)
    predicted, truth, residuals = [], [], []
    extra: dict = {}
    for e in eps:
        pe = perturbed_equilibrium(eq, profile, e)
        if kind == "capacity":
            p_val, t_val = eq.capacity + e * T1, pe.capacity
            res = t_val - p_val
            rad = 100.0 * pe.quadrature.circumradius
            ff = far_field_coefficient(pe, rad)
            extra.setdefault("farfield_vs_gauss", []).append(abs(ff - pe.capacity) / pe.capacity)
            extra.setdefault("farfield_tolerance", []).append(3.0 / rad)
        elif kind == "farfield":
            p_val = predict_farfield(eq, fld, e, x)
            t_val = float(pe.potential(x))
            res = t_val - p_val
        elif kind == "current":
            pv = predict_current(eq, corrector, fld, e)
            tv = pe.density
            p_val, t_val = q.norm(pv), q.norm(tv)
            res = q.norm(tv - pv)
        elif kind == "density":
            p_val, t_val = q.norm(eq.density), q.norm(pe.density)
            res = q.norm(pe.density - eq.density)
        elif kind == "eigenvector":
            pv = predict_eigenvector(eq, corrector, fld, e)
            tv = ground_truth_eigenvector(eq, profile, e, reference=pv)
            p_val, t_val = q.norm(pv), q.norm(tv)
            res = q.norm(tv - pv)
            extra.setdefault("pred_dot_base", []).append(q.inner(pv, base_vec))
            extra.setdefault("truth_dot_base", []).append(q.inner(tv, base_vec))
        else:  # pairing
            t_val, p_val = eigenvector_pairing(eq, fld, e)
            res = t_val - p_val
        predicted.append(float(p_val))
        truth.append(float(t_val))
        residuals.append(abs(float(res)))
        pe.quadrature._cache.clear()
    slope, intercept, used = fit_order(eps, residuals, floor)
    if kind == "farfield":
        rx = float(np.linalg.norm(x))
        bounds = [2.0 * (e * e / rx + e / rx**2) for e in eps]
        extra["point"] = [float(t) for t in x]
        extra["bound"] = bounds
        verdict = "pass" if all(r <= b for r, b in zip(residuals, bounds)) else "fail"
        expected = 2.0
    elif kind == "density":
        expected = 1.0
        order_tolerance = 0.1
        verdict = _slope_verdict(slope, used, expected, order_tolerance, at_least=True)
    else:
        expected = 2.0
        verdict = _slope_verdict(slope, used, expected, order_tolerance)
    if kind == "capacity":
        extra["T1"] = T1
        extra["capacity"] = eq.capacity
    return ExpansionReport(
        kind, eps, predicted, truth, residuals, slope, intercept, floor, list(used), verdict, expected, order_tolerance, extra
    )


def operator_order_study(
    kind: str,
    surface: ParametricSurface,
    profile: Profile,
    psi: Callable[[np.ndarray], np.ndarray],
    eps_list: Sequence[float] = DEFAULT_EPS,
    resolution: int = 64,
    floor: float | None = None,
) -> ExpansionReport:
    """Order check of the perturbed-operator expansions.

    ``kind="S1"``: residual ``||S_eps[psi] o Psi - S[psi] - eps S1[psi]||``;
    ``kind="K1"``: residual of ``(1/2 + K*_eps)[psi]`` against
    ``(1/2 + K*)[psi] + eps K1[psi]``.  ``psi`` is a function of position
    sampled at the base nodes (the pulled-back density keeps nodal values).
    """
    from .potential import assemble_K1, assemble_S1

    if kind not in ("S1", "K1"):
        raise ConfigurationError("kind must be 'S1' or 'K1'")
    eps = _validate_eps(eps_list)
    q = build_quadrature(surface, resolution)
    fld = perturbation_field(q, profile)
    values = psi(q.points)

    def apply(quad, v):
        if kind == "S1":
            return assemble_S(quad).entries @ v
        return 0.5 * v + assemble_Kstar(quad).entries @ v

    base = apply(q, values)
    d1 = (assemble_S1 if kind == "S1" else assemble_K1)(q, fld).entries @ values
    if floor is None:
        n_hi = 2 * int(round(0.75 * resolution))
        q_hi = build_quadrature(surface, n_hi)
        floor = _self_error(base, q, apply(q_hi, psi(q_hi.points)), q_hi)
        q_hi._cache.clear()
    predicted, truth, residuals = [], [], []
    for e in eps:
        qe = build_quadrature(perturb_surface(surface, profile, e), resolution)
        tv = apply(qe, values)
        pv = base + e * d1
        predicted.append(q.norm(pv))
        truth.append(q.norm(tv))
        residuals.append(q.norm(tv - pv))
    slope, intercept, used = fit_order(eps, residuals, floor)
    verdict = _slope_verdict(slope, used, 2.0, 0.3)
    return ExpansionReport(kind, eps, predicted, truth, residuals, slope, intercept, floor, list(used), verdict, 2.0, 0.3)
