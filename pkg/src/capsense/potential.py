"""Layer potentials, Neumann-Poincare operators and their shape derivatives.

Conventions: ``Gamma(x) = -1/(4 pi |x|)``,
``S[phi](x) = int Gamma(x - y) phi(y) dsigma(y)``,
``D[phi](x) = int dGamma/dn(y)(x - y) phi(y) dsigma(y)`` and
``K*[phi](x) = (1/4pi) int <x - y, n(x)>/|x - y|^3 phi(y) dsigma(y)``.
Exterior traces are ``dS/dn|+ = (1/2 + K*)`` and ``D|+ = (-1/2 + K)``.

The Nystrom matrices use the quadrature weights off the diagonal.  The weakly
singular diagonal of S is obtained by singularity subtraction: for a target
``x`` the integral of ``1/|x - y|`` over the surface equals the integral of
``<y - x, n(y)>/r * (-2 tau(y)) - <y - x, n(y)>^2 / r^3`` (a surface divergence
identity), whose integrand is bounded, so the same weights integrate it to
high accuracy.  K gets its diagonal from ``K[1] = 1/2`` and K* borrows the
same diagonal, which makes K* the exact weighted adjoint of K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NearFieldError, QuadratureMismatchError
from .geometry import PerturbationField, SurfaceQuadrature, _lagrange_matrix

__all__ = [
    "DensityVector",
    "BoundaryOperatorMatrix",
    "eval_single_layer",
    "eval_double_layer",
    "single_layer_along_normal",
    "assemble_S",
    "assemble_K",
    "assemble_Kstar",
    "exterior_normal_derivative_S",
    "normal_derivative_D",
    "assemble_S1",
    "assemble_K1",
    "single_layer_lu",
]

_FOUR_PI = 4.0 * math.pi
_BLOCK = 256


@dataclass(frozen=True, eq=False)
class DensityVector:
    """Nodal values of a boundary density bound to one quadrature."""

    values: np.ndarray
    quadrature: SurfaceQuadrature

    def __post_init__(self):
        if len(self.values) != self.quadrature.size:
            raise QuadratureMismatchError("density length differs from the node count")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class BoundaryOperatorMatrix:
    """Dense operator matrix of kind S, K, Kstar, S1 or K1."""

    entries: np.ndarray
    kind: str
    quadrature: SurfaceQuadrature

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    @property
    def shape(self):
        return self.entries.shape

    def apply(self, density) -> np.ndarray:
        """Matrix action on nodal values (checked against the bound quadrature)."""
        return self.entries @ self.quadrature.check(density, "density")

    __matmul__ = apply


# ---------------------------------------------------------------------------
# Off-surface evaluation
# ---------------------------------------------------------------------------


def _targets(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    return np.atleast_2d(arr), arr.ndim == 1


def _check_far(quad: SurfaceQuadrature, pts: np.ndarray, margin: float = 2.0):
    for start in range(0, len(pts), _BLOCK):
        d = np.linalg.norm(pts[start : start + _BLOCK, None, :] - quad.points[None, :, :], axis=2)
        j = np.argmin(d, axis=1)
        bad = d[np.arange(len(j)), j] < margin * quad.spacing[j]
        if np.any(bad):
            raise NearFieldError(
                "target closer than 2 local node spacings to the surface; "
                "use the on-surface operators or single_layer_along_normal"
            )


def _layer_sums(quad, density, pts, kind):
    # density may be (N,) or (N, k); the kernel block is built once per target block
    phiw = density * (quad.weights if density.ndim == 1 else quad.weights[:, None])
    out = np.empty((len(pts),) + density.shape[1:])
    for start in range(0, len(pts), _BLOCK):
        p = pts[start : start + _BLOCK]
        d = quad.points[None, :, :] - p[:, None, :]  # y - x
        r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        if kind == "S":
            k = -1.0 / (_FOUR_PI * r)
        else:
            k = np.einsum("ijk,jk->ij", d, quad.normals) / (_FOUR_PI * r**3)
        if density.ndim == 1:
            out[start : start + _BLOCK] = np.sum(k * phiw[None, :], axis=1)
        else:
            out[start : start + _BLOCK] = k @ phiw
    return out


def eval_single_layer(quadrature: SurfaceQuadrature, density, x, check: bool = True):
    """Single-layer potential ``S[phi](x)`` at off-surface point(s) ``x``.

    Raises :class:`NearFieldError` when a target lies within two local node
    spacings of the surface.
    """
    phi = quadrature.check(density, "density")
    pts, single = _targets(x)
    if not np.any(phi):
        out = np.zeros(len(pts))
    else:
        if check:
            _check_far(quadrature, pts)
        out = _layer_sums(quadrature, phi, pts, "S")
    return float(out[0]) if single else out


def eval_double_layer(quadrature: SurfaceQuadrature, density, x, check: bool = True):
    """Double-layer potential ``D[phi](x)`` at off-surface point(s) ``x``."""
    phi = quadrature.check(density, "density")
    pts, single = _targets(x)
    if not np.any(phi):
        out = np.zeros(len(pts))
    else:
        if check:
            _check_far(quadrature, pts)
        out = _layer_sums(quadrature, phi, pts, "D")
    return float(out[0]) if single else out


def single_layer_along_normal(quadrature: SurfaceQuadrature, density, offsets, order: int = 14, band=(3.0, 10.0)):
    """``S[phi](x_i + d n_i)`` for every node ``x_i`` and small offsets ``d >= 0``.

    Direct quadrature is inaccurate within a few node spacings of the
    surface.  Along each normal ray the exterior potential is smooth, so we
    sample it where plain quadrature is accurate (``d`` in ``[3h, 10h]``,
    ``h`` the largest node spacing), add the on-surface value from the
    assembled S matrix at ``d = 0`` and evaluate the interpolating polynomial
    at the requested offsets.

    ``density`` may hold several densities as columns.  Returns an array of
    shape ``(N, len(offsets))``, or ``(N, k, len(offsets))`` for ``k`` columns.
    """
    phi = quadrature.check(density, "density")
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    hmax = float(np.max(quadrature.spacing))
    lo, hi = band[0] * hmax, band[1] * hmax
    k = np.arange(order)
    far = lo + (hi - lo) * 0.5 * (1 - np.cos(np.pi * (k + 0.5) / order))
    nodes = np.concatenate([[0.0], far])
    samples = np.empty(phi.shape + (len(nodes),))
    samples[..., 0] = assemble_S(quadrature).entries @ phi
    for c, d in enumerate(far, start=1):
        samples[..., c] = _layer_sums(quadrature, phi, quadrature.points + d * quadrature.normals, "S")
    return samples @ _lagrange_matrix(nodes, offsets).T


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def _assemble(quad: SurfaceQuadrature, want: tuple[str, ...]):
    X, nrm, w, tau = quad.points, quad.normals, quad.weights, quad.tau
    N = quad.size
    out = {k: np.empty((N, N)) for k in want}
    need_k = "K" in want or "Kstar" in want
    for start in range(0, N, _BLOCK):
        stop = min(start + _BLOCK, N)
        rows = np.arange(start, stop)
        loc = rows - start
        d = X[None, :, :] - X[start:stop, None, :]  # y - x
        r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        r[loc, rows] = 1.0
        inv = 1.0 / r
        inv[loc, rows] = 0.0
        dn_y = np.einsum("ijk,jk->ij", d, nrm)  # <y - x, n(y)>
        if "S" in want:
            vn = dn_y * inv
            integrand = vn * (-2.0 * tau)[None, :] - vn * vn * inv
            integrand[loc, rows] = 0.0
            A = np.sum(integrand * w[None, :], axis=1)
            blk = -(inv * w[None, :]) / _FOUR_PI
            blk[loc, rows] = -(A - np.sum(inv * w[None, :], axis=1)) / _FOUR_PI
            out["S"][start:stop] = blk
        if need_k:
            inv3 = inv**3
            kb = dn_y * inv3 * w[None, :] / _FOUR_PI
            kb[loc, rows] = 0.0
            diag = 0.5 - np.sum(kb, axis=1)
            kb[loc, rows] = diag
            if "K" in want:
                out["K"][start:stop] = kb
            if "Kstar" in want:
                dn_x = -np.einsum("ijk,ik->ij", d, nrm[start:stop])  # <x - y, n(x)>
                ks = dn_x * inv3 * w[None, :] / _FOUR_PI
                ks[loc, rows] = diag
                out["Kstar"][start:stop] = ks
    return out


def _cached(quad: SurfaceQuadrature, kind: str) -> BoundaryOperatorMatrix:
    cache = quad._cache
    if kind not in cache:
        want = ("S",) if kind == "S" else ("K", "Kstar")
        for k, m in _assemble(quad, want).items():
            cache[k] = BoundaryOperatorMatrix(m, k, quad)
    return cache[kind]


def assemble_S(quadrature: SurfaceQuadrature) -> BoundaryOperatorMatrix:
    """Dense single-layer matrix (cached on the quadrature)."""
    return _cached(quadrature, "S")


def assemble_K(quadrature: SurfaceQuadrature) -> BoundaryOperatorMatrix:
    """Dense NP matrix K with the diagonal set so that ``K[1] = 1/2``."""
    return _cached(quadrature, "K")


def assemble_Kstar(quadrature: SurfaceQuadrature) -> BoundaryOperatorMatrix:
    """Dense adjoint NP matrix K*, the weighted transpose of K."""
    return _cached(quadrature, "Kstar")


def single_layer_lu(quadrature: SurfaceQuadrature):
    """LU factors of the S matrix (cached) and the 1-norm of S."""
    cache = quadrature._cache
    if "S_lu" not in cache:
        S = assemble_S(quadrature).entries
        cache["S_norm1"] = float(np.max(np.sum(np.abs(S), axis=0)))
        cache["S_lu"] = sla.lu_factor(S, check_finite=False)
    return cache["S_lu"], cache["S_norm1"]


def exterior_normal_derivative_S(quadrature: SurfaceQuadrature, density) -> DensityVector:
    """Exterior normal derivative of ``S[phi]``, i.e. ``(1/2 + K*) phi``."""
    phi = quadrature.check(density, "density")
    return DensityVector(0.5 * phi + assemble_Kstar(quadrature).entries @ phi, quadrature)


def normal_derivative_D(quadrature: SurfaceQuadrature) -> np.ndarray:
    """Matrix of ``f -> dD[f]/dn`` on the surface (no jump across it).

    Uses the Calderon relation ``dD/dn = (K* - 1/2) S^{-1} (1/2 + K)``, which
    follows from the exterior representation ``w = S[phi] - D[f]`` with
    ``S phi = (1/2 + K) f`` and ``dw/dn|+ = phi``.
    """
    cache = quadrature._cache
    if "dDdn" not in cache:
        lu, _ = single_layer_lu(quadrature)
        K = assemble_K(quadrature).entries
        Ks = assemble_Kstar(quadrature).entries
        rhs = K.copy()
        rhs[np.diag_indices_from(rhs)] += 0.5
        X = sla.lu_solve(lu, rhs, check_finite=False)
        M = Ks @ X - 0.5 * X
        cache["dDdn"] = M
    return cache["dDdn"]


def _check_field(quadrature: SurfaceQuadrature, fld: PerturbationField):
    if fld.quadrature is not quadrature:
        raise QuadratureMismatchError("perturbation field is bound to a different quadrature")


def assemble_S1(quadrature: SurfaceQuadrature, fld: PerturbationField) -> BoundaryOperatorMatrix:
    """First-order shape derivative of the single layer (exterior traces).

    ``S1[psi] = -2 S[tau h psi] + h (1/2 + K*) psi + (-1/2 + K)[h psi]``.
    """
    _check_field(quadrature, fld)
    N = quadrature.size
    if fld.is_zero:
        return BoundaryOperatorMatrix(np.zeros((N, N)), "S1", quadrature)
    h, tau = fld.h, quadrature.tau
    S = assemble_S(quadrature).entries
    K = assemble_K(quadrature).entries
    Ks = assemble_Kstar(quadrature).entries
    M = -2.0 * S * (tau * h)[None, :]
    M += h[:, None] * Ks
    M[np.diag_indices(N)] += 0.5 * h
    M += K * h[None, :]
    M[np.diag_indices(N)] -= 0.5 * h
    return BoundaryOperatorMatrix(M, "S1", quadrature)


def assemble_K1(quadrature: SurfaceQuadrature, fld: PerturbationField) -> BoundaryOperatorMatrix:
    """First-order shape derivative of ``dS/dn|+`` (exterior trace).

    ``K1[psi] = 2 (tau h (1/2 + K*) psi - (1/2 + K*)[tau h psi]) + dD[h psi]/dn
    - (1/sqrt g) div(h sqrt g G^{-1} grad S[psi])``, with the surface
    divergence term differenced on the chart grid.
    """
    _check_field(quadrature, fld)
    N = quadrature.size
    if fld.is_zero:
        return BoundaryOperatorMatrix(np.zeros((N, N)), "K1", quadrature)
    th = quadrature.tau * fld.h
    S = assemble_S(quadrature).entries
    Ks = assemble_Kstar(quadrature).entries
    M = 2.0 * (th[:, None] * Ks - Ks * th[None, :])  # the 1/2 terms cancel
    M += normal_derivative_D(quadrature) * fld.h[None, :]
    L = quadrature.differences.divergence_matrix(fld.h)
    M -= L @ S
    return BoundaryOperatorMatrix(M, "K1", quadrature)
