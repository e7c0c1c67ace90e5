"""Parametric surfaces, surface quadrature and discrete differential geometry.

Charts are written once as ``jax`` functions ``X(p, q)`` of a parameter pair
``p = (xi, theta)`` and a flat parameter vector ``q``.  First and second
derivatives come from automatic differentiation, so the normal, the metric,
the mean curvature and every perturbed chart ``X + eps*h*n`` are exact up to
rounding.  Shape parameters travel in ``q`` so each chart family compiles only
once per process.

Sign convention for the mean curvature: ``tau`` is the coefficient in
``Laplace = d_nn - 2 tau d_n + Laplace_G`` with the outward normal, so a
sphere of radius R has ``tau = -1/R``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre

from .errors import (
    ConfigurationError,
    EvaluationError,
    InvalidProfileError,
    InvalidShapeError,
    PerturbationTooLargeError,
    QuadratureMismatchError,
)

jax.config.update("jax_enable_x64", True)

__all__ = [
    "Chart",
    "ChartEval",
    "ParametricSurface",
    "SurfaceQuadrature",
    "Profile",
    "PerturbationField",
    "make_surface",
    "plane_patch",
    "build_quadrature",
    "mean_curvature",
    "perturb_surface",
    "perturbation_field",
    "normal_expansion",
    "area_element_expansion",
    "laplace_beltrami",
    "weighted_laplace_beltrami",
    "tangential_gradient",
    "real_sph_harm",
    "resample",
    "SH_INDEX",
]

MIN_RESOLUTION = 8
_TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Real spherical harmonics (l <= 4) as polynomials of a unit vector
# ---------------------------------------------------------------------------

SH_INDEX: list[tuple[int, int]] = [(l, m) for l in range(5) for m in range(-l, l + 1)]


def _sh_table():
    # Y_lm(u) = N * (d^|m| P_l / dz^|m|)(z) * {Re, Im}((x + i y)^|m|),
    # orthonormal on the unit sphere, no Condon-Shortley phase.
    table = []
    for l, m in SH_INDEX:
        am = abs(m)
        norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
        if m != 0:
            norm *= math.sqrt(2.0)
        c = np.zeros(l + 1)
        c[l] = 1.0
        poly = legendre.leg2poly(legendre.legder(c, am)) if am <= l else np.zeros(1)
        table.append((norm, tuple(float(v) for v in poly), am, int(np.sign(m))))
    return table


_SH_TABLE = _sh_table()


def _sh_features(u):
    x, y, z = u[0], u[1], u[2]
    zp = [jnp.ones_like(z), z, z * z, z * z * z, z * z * z * z]
    re = [jnp.ones_like(x)]
    im = [jnp.zeros_like(x)]
    for _ in range(4):
        re.append(re[-1] * x - im[-1] * y)
        im.append(im[-1] * x + re[-2] * y)
    out = []
    for norm, poly, am, sign in _SH_TABLE:
        q = sum(c * zp[k] for k, c in enumerate(poly))
        az = re[am] if sign > 0 else (im[am] if sign < 0 else 1.0)
        out.append(norm * q * az)
    return jnp.stack(out)


_sh_batch = jax.jit(jax.vmap(_sh_features))


def real_sph_harm(l: int, m: int, points: np.ndarray) -> np.ndarray:
    """Real orthonormal spherical harmonic Y_lm evaluated at ``points/|points|``.

    ``m > 0`` selects the cosine branch, ``m < 0`` the sine branch.  Only
    ``l <= 4`` is available.
    """
    if (l, m) not in SH_INDEX:
        raise ValueError(f"Y_{l}{m} not available (need 0 <= l <= 4, |m| <= l)")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    u = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    return np.asarray(_sh_batch(u))[:, SH_INDEX.index((l, m))]


# ---------------------------------------------------------------------------
# Perturbation profiles h(x)
# ---------------------------------------------------------------------------

# layout of the profile coefficient vector
_H_CONST, _H_GRAD, _H_SH, _H_BUMP = 0, slice(1, 4), slice(4, 29), slice(29, 34)
N_PROFILE = 34


def _h_fn(x, hq):
    r = jnp.sqrt(jnp.sum(x * x))
    rs = jnp.where(r > 0, r, 1.0)
    u = x / rs
    bump = hq[_H_BUMP]
    d = x - bump[1:4]
    val = hq[_H_CONST] + jnp.dot(hq[_H_GRAD], x) + jnp.dot(hq[_H_SH], _sh_features(u))
    return val + bump[0] * jnp.exp(-jnp.sum(d * d) / (2.0 * bump[4] ** 2))


_h_batch = jax.jit(jax.vmap(_h_fn, in_axes=(0, None)))
_h_grad_batch = jax.jit(jax.vmap(jax.grad(_h_fn), in_axes=(0, None)))


@dataclass(frozen=True)
class Profile:
    """Closed-form perturbation amplitude ``h`` on ambient space.

    A profile is a constant plus a linear function plus a combination of real
    spherical harmonics of ``x/|x|`` (l <= 4) plus at most one Gaussian bump.
    Because it is closed form, its gradient and the perturbed chart
    derivatives are exact.  Build one with :func:`Profile.constant`,
    :func:`Profile.coordinate`, :func:`Profile.harmonic`,
    :func:`Profile.bump` or :func:`Profile.parse`, and combine with ``+`` and
    scalar ``*``.
    """

    coefficients: tuple
    label: str = "h"

    def __post_init__(self):
        if len(self.coefficients) != N_PROFILE:
            raise InvalidProfileError("profile coefficient vector has the wrong length")

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.coefficients, dtype=float)

    @property
    def is_zero(self) -> bool:
        v = self.vector
        return not (np.any(v[:29]) or v[29] != 0.0)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.is_zero:
            return np.zeros(len(pts))
        return np.asarray(_h_batch(pts, self.vector))

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Ambient gradient of h at ``points`` (shape (M, 3))."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.is_zero:
            return np.zeros_like(pts)
        return np.asarray(_h_grad_batch(pts, self.vector))

    # -- constructors --------------------------------------------------------

    @staticmethod
    def _blank():
        v = np.zeros(N_PROFILE)
        v[33] = 1.0  # unit bump width keeps the expression finite
        return v

    @classmethod
    def zero(cls) -> "Profile":
        return cls(tuple(cls._blank()), "0")

    @classmethod
    def constant(cls, value: float = 1.0) -> "Profile":
        v = cls._blank()
        v[_H_CONST] = value
        return cls(tuple(v), f"const:{value:g}")

    @classmethod
    def coordinate(cls, axis: int | str, scale: float = 1.0) -> "Profile":
        if isinstance(axis, str):
            axis = "xyz".index(axis)
        v = cls._blank()
        v[1 + axis] = scale
        return cls(tuple(v), f"{'xyz'[axis]}:{scale:g}")

    @classmethod
    def harmonic(cls, l: int, m: int, amplitude: float = 1.0) -> "Profile":
        if (l, m) not in SH_INDEX:
            raise InvalidProfileError(f"harmonic Y_{l}{m} unavailable (l <= 4)")
        v = cls._blank()
        v[4 + SH_INDEX.index((l, m))] = amplitude
        return cls(tuple(v), f"Y{l}{m}:{amplitude:g}")

    @classmethod
    def bump(cls, center: Sequence[float], width: float, amplitude: float = 1.0) -> "Profile":
        if width <= 0:
            raise InvalidProfileError("bump width must be positive")
        v = cls._blank()
        v[29] = amplitude
        v[30:33] = center
        v[33] = width
        c = ",".join(f"{t:g}" for t in center)
        return cls(tuple(v), f"bump:{c},{width:g},{amplitude:g}")

    @classmethod
    def parse(cls, text: str) -> "Profile":
        """Parse ``name[:params]``.

        Accepted forms: ``const[:c]``, ``zero``, ``x|y|z[:scale]``,
        ``Ylm[:amp]`` (e.g. ``Y20``, ``Y2-1:0.5``),
        ``bump:cx,cy,cz,width[,amp]``.  Several terms may be joined with ``+``.
        """
        terms = [t.strip() for t in text.split("+") if t.strip()]
        if not terms:
            raise InvalidProfileError("empty perturbation profile")
        total = None
        for term in terms:
            p = cls._parse_term(term)
            total = p if total is None else total + p
        return cls(total.coefficients, text)

    @classmethod
    def _parse_term(cls, text: str) -> "Profile":
        name, _, arg = text.partition(":")
        try:
            vals = [float(s) for s in arg.split(",")] if arg else []
        except ValueError as exc:
            raise InvalidProfileError(f"bad profile parameters in {text!r}") from exc
        if any(not math.isfinite(v) for v in vals):
            raise InvalidProfileError(f"non-finite profile parameter in {text!r}")
        name = name.strip()
        if name == "zero" and not vals:
            return cls.zero()
        if name in ("const", "constant") and len(vals) <= 1:
            return cls.constant(vals[0] if vals else 1.0)
        if name in ("x", "y", "z") and len(vals) <= 1:
            return cls.coordinate(name, vals[0] if vals else 1.0)
        m = re.fullmatch(r"Y(\d)(-?\d)", name)
        if m and len(vals) <= 1:
            return cls.harmonic(int(m.group(1)), int(m.group(2)), vals[0] if vals else 1.0)
        if name == "bump" and len(vals) in (4, 5):
            return cls.bump(vals[:3], vals[3], vals[4] if len(vals) == 5 else 1.0)
        raise InvalidProfileError(f"unknown perturbation profile {text!r}")

    def __add__(self, other: "Profile") -> "Profile":
        a, b = self.vector, other.vector
        if a[29] != 0.0 and b[29] != 0.0:
            raise InvalidProfileError("a profile may contain at most one bump")
        v = a + b
        v[29:34] = a[29:34] if a[29] != 0.0 else b[29:34]
        return Profile(tuple(v), f"{self.label}+{other.label}")

    def __mul__(self, s: float) -> "Profile":
        v = self.vector
        v[:30] *= s
        return Profile(tuple(v), f"{s:g}*({self.label})")

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# Chart functions (jax)
# ---------------------------------------------------------------------------


def _polar_chart(p, q):
    # q = (s1, s2, s3, P[9]); local (s1 sin cos, s2 sin sin, s3 cos) rotated by P
    xi, th = p[0], p[1]
    local = jnp.array([q[0] * jnp.sin(xi) * jnp.cos(th), q[1] * jnp.sin(xi) * jnp.sin(th), q[2] * jnp.cos(xi)])
    return q[3:12].reshape(3, 3) @ local


def _star_chart(p, q):
    # q = (R, c_lm[25]); r = R (1 + sum c_lm Y_lm(u))
    xi, th = p[0], p[1]
    u = jnp.array([jnp.sin(xi) * jnp.cos(th), jnp.sin(xi) * jnp.sin(th), jnp.cos(xi)])
    return q[0] * (1.0 + jnp.dot(q[1:26], _sh_features(u))) * u


def _curvature_chart(p, q):
    # lines-of-curvature chart of the ellipsoid with semi-axes A > B > C
    # (q = (A, B, C, P[9])); orthogonal by construction.
    be, ph = p[0], p[1]
    a, b, c = q[0], q[1], q[2]
    s = jnp.sqrt(a * a - c * c)
    local = jnp.array(
        [
            a * jnp.cos(ph) * jnp.sqrt(a * a - b * b * jnp.sin(be) ** 2 - c * c * jnp.cos(be) ** 2) / s,
            b * jnp.cos(be) * jnp.sin(ph),
            c * jnp.sin(be) * jnp.sqrt(a * a * jnp.sin(ph) ** 2 + b * b * jnp.cos(ph) ** 2 - c * c) / s,
        ]
    )
    return q[3:12].reshape(3, 3) @ local


def _plane_chart(p, q):
    return q[0:3] + p[0] * q[3:6] + p[1] * q[6:9]


_PERTURBED_FNS: dict = {}


def _perturbed_fn(base_fn):
    """Chart of ``X + eps * h(X) * n(X)`` for a base chart function."""
    if base_fn in _PERTURBED_FNS:
        return _PERTURBED_FNS[base_fn]

    def fn(p, q):
        o, eps = q[0], q[1]
        hq = q[2 : 2 + N_PROFILE]
        bq = q[2 + N_PROFILE :]
        X = base_fn(p, bq)
        J = jax.jacfwd(base_fn)(p, bq)
        c = jnp.cross(J[:, 0], J[:, 1])
        n = o * c / jnp.sqrt(jnp.sum(c * c))
        return X + eps * _h_fn(X, hq) * n

    _PERTURBED_FNS[base_fn] = fn
    return fn


_DERIVS: dict = {}


def _derivatives(fn):
    if fn not in _DERIVS:

        def g(p, q):
            return fn(p, q), jax.jacfwd(fn)(p, q), jax.hessian(fn)(p, q)

        _DERIVS[fn] = jax.jit(jax.vmap(g, in_axes=(0, None)))
    return _DERIVS[fn]


# ---------------------------------------------------------------------------
# Surfaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChartEval:
    """Chart point and derivatives at a batch of parameter pairs."""

    X: np.ndarray
    X_xi: np.ndarray
    X_theta: np.ndarray
    X_xixi: np.ndarray
    X_xitheta: np.ndarray
    X_thetatheta: np.ndarray

    @property
    def cross(self) -> np.ndarray:
        return np.cross(self.X_xi, self.X_theta)


@dataclass(frozen=True, eq=False)
class Chart:
    """One chart ``X(xi, theta)`` over a parameter rectangle.

    ``seam`` describes how the chart closes up at the ends of the xi range:
    ``"pole"`` (spherical-type, the neighbour of ``(xi, theta)`` across an end
    is ``(-xi, theta + pi)``), ``"fold"`` (curvature-line chart, neighbour
    ``(pi - xi, -theta)``) or ``None`` for an open patch.  ``flux_parity`` is
    the sign picked up by the xi-component of a tangential flux across the
    seam.
    """

    fn: Callable
    params: np.ndarray
    xi_range: tuple
    theta_range: tuple
    xi_rule: str  # "gauss-cos" | "midpoint" | "gauss"
    theta_rule: str  # "periodic" | "gauss"
    seam: str | None
    flux_parity: int = 1
    orientation: int = 1

    def evaluate(self, xi, theta) -> ChartEval:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        theta = np.broadcast_to(np.atleast_1d(np.asarray(theta, dtype=float)), xi.shape)
        P = np.stack([xi.ravel(), theta.ravel()], axis=1)
        X, J, H = _derivatives(self.fn)(P, self.params)
        X, J, H = np.asarray(X), np.asarray(J), np.asarray(H)
        return ChartEval(X, J[:, :, 0], J[:, :, 1], H[:, :, 0, 0], H[:, :, 0, 1], H[:, :, 1, 1])

    def perturbed(self, profile: Profile, eps: float) -> "Chart":
        q = np.concatenate([[float(self.orientation), float(eps)], profile.vector, self.params])
        return Chart(
            _perturbed_fn(self.fn),
            q,
            self.xi_range,
            self.theta_range,
            self.xi_rule,
            self.theta_rule,
            self.seam,
            self.flux_parity,
            self.orientation,
        )


@dataclass(frozen=True, eq=False)
class ParametricSurface:
    """A closed (or, for test patches, open) surface given by analytic charts."""

    name: str
    params: tuple
    charts: tuple
    closed: bool = True
    base: "ParametricSurface | None" = None
    profile: Profile | None = None
    eps: float = 0.0

    @property
    def key(self) -> tuple:
        """Hashable identity used for caching expensive derived data."""
        base = self.base.key if self.base is not None else None
        prof = self.profile.coefficients if self.profile is not None else None
        return (self.name, self.params, base, prof, self.eps)

    def sample(self, n: int = 32) -> np.ndarray:
        return build_quadrature(self, n).points

    @cached_property
    def circumradius(self) -> float:
        """Largest distance from the origin over a sample of the surface."""
        return float(np.max(np.linalg.norm(self.sample(32), axis=1)))

    @cached_property
    def diameter(self) -> float:
        pts = self.sample(24)
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt(np.max(np.einsum("ijk,ijk->ij", d, d))))


def _axis_frame(k: int) -> np.ndarray:
    # rotation taking the local polar axis e3 onto global axis k (cyclic, det +1)
    cols = {0: (1, 2, 0), 1: (2, 0, 1), 2: (0, 1, 2)}[k]
    P = np.zeros((3, 3))
    for local, glob in enumerate(cols):
        P[glob, local] = 1.0
    return P


def _orientation(fn, params, p) -> int:
    X, J, _ = _derivatives(fn)(np.asarray([p], dtype=float), params)
    c = np.cross(np.asarray(J)[0, :, 0], np.asarray(J)[0, :, 1])
    return 1 if float(np.dot(c, np.asarray(X)[0])) > 0 else -1


def _polar(semi: Sequence[float], axis: int) -> Chart:
    P = _axis_frame(axis)
    order = [int(np.argmax(P[:, j])) for j in range(3)]
    q = np.concatenate([[semi[order[0]], semi[order[1]], semi[order[2]]], P.ravel()])
    return Chart(_polar_chart, q, (0.0, math.pi), (0.0, _TWO_PI), "gauss-cos", "periodic", "pole", 1, 1)


def make_surface(name: str, *params, chart: str = "auto", coefficients: dict | None = None) -> ParametricSurface:
    """Build a named analytic surface.

    Parameters
    ----------
    name
        ``"sphere"`` (R), ``"ellipsoid"`` (a, b, c semi-axes along x, y, z) or
        ``"star"`` (R, then optional ``l, m, c`` triples), giving
        ``r = R (1 + sum c_lm Y_lm)``.
    chart
        Ellipsoid only.  ``"auto"`` uses a polar chart whose axis is the
        distinct axis of a spheroid or the longest axis of a triaxial
        ellipsoid.  ``"curvature"`` selects the orthogonal lines-of-curvature
        chart (needs three distinct axes).
    coefficients
        Star only: mapping ``(l, m) -> c_lm``, merged with the triples given
        positionally.

    Returns
    -------
    ParametricSurface
    """
    vals = [float(v) for v in params]
    if any(not math.isfinite(v) for v in vals):
        raise InvalidShapeError("shape parameters must be finite")
    if name == "sphere":
        if len(vals) != 1 or vals[0] <= 0:
            raise InvalidShapeError("sphere needs one positive radius")
        R = vals[0]
        return ParametricSurface("sphere", (R,), (_polar((R, R, R), 2),))
    if name == "ellipsoid":
        if len(vals) != 3 or min(vals) <= 0:
            raise InvalidShapeError("ellipsoid needs three positive semi-axes")
        a, b, c = vals
        if chart == "curvature":
            if len({a, b, c}) < 3:
                raise InvalidShapeError("the curvature-line chart needs three distinct semi-axes")
            order = np.argsort(vals)[::-1]
            P = np.zeros((3, 3))
            for local, glob in enumerate(order):
                P[glob, local] = 1.0
            q = np.concatenate([np.asarray(vals)[order], P.ravel()])
            o = _orientation(_curvature_chart, q, (0.3, 0.4))
            ch = Chart(
                _curvature_chart, q, (-math.pi / 2, math.pi / 2), (-math.pi, math.pi), "midpoint", "periodic", "fold", -1, o
            )
            return ParametricSurface("ellipsoid", (a, b, c, "curvature"), (ch,))
        if chart != "auto":
            raise InvalidShapeError(f"unknown ellipsoid chart {chart!r}")
        if a == b == c:
            axis = 2
        elif a == b:
            axis = 2
        elif a == c:
            axis = 1
        elif b == c:
            axis = 0
        else:
            axis = int(np.argmax(vals))
        return ParametricSurface("ellipsoid", (a, b, c), (_polar((a, b, c), axis),))
    if name == "star":
        if not vals or vals[0] <= 0 or (len(vals) - 1) % 3:
            raise InvalidShapeError("star needs R > 0 followed by (l, m, c) triples")
        coef = dict(coefficients or {})
        for i in range(1, len(vals), 3):
            coef[(int(vals[i]), int(vals[i + 1]))] = coef.get((int(vals[i]), int(vals[i + 1])), 0.0) + vals[i + 2]
        c = np.zeros(len(SH_INDEX))
        for lm, v in coef.items():
            if lm not in SH_INDEX:
                raise InvalidShapeError(f"star coefficient {lm} outside l <= 4")
            c[SH_INDEX.index(lm)] = v
        q = np.concatenate([[vals[0]], c])
        ch = Chart(_star_chart, q, (0.0, math.pi), (0.0, _TWO_PI), "gauss-cos", "periodic", "pole", 1, 1)
        surf = ParametricSurface("star", tuple([vals[0]] + [float(x) for lm in sorted(coef) for x in (*lm, coef[lm])]), (ch,))
        # a radial graph must stay strictly star-shaped
        xi, th = build_quadrature(surf, 32).params.T
        u = np.stack([np.sin(xi) * np.cos(th), np.sin(xi) * np.sin(th), np.cos(xi)], 1)
        r = vals[0] * (1.0 + np.asarray(_sh_batch(u)) @ c)  # signed radial function
        if np.min(r) <= 0.05 * vals[0]:
            raise InvalidShapeError("star-shape radius function must stay positive")
        return surf
    raise InvalidShapeError(f"unknown shape {name!r}")


def plane_patch(origin, u, v, extent=((0.0, 1.0), (0.0, 1.0))) -> ParametricSurface:
    """Open flat patch ``origin + xi*u + theta*v`` (used for testing the
    surface differential operators on an exactly flat chart)."""
    q = np.concatenate([np.asarray(origin, float), np.asarray(u, float), np.asarray(v, float)])
    ch = Chart(_plane_chart, q, tuple(extent[0]), tuple(extent[1]), "gauss", "gauss", None, 1, 1)
    return ParametricSurface("plane", tuple(q), (ch,), closed=False)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def _rule(kind: str, lo: float, hi: float, n: int):
    if kind == "gauss-cos":
        # Gauss-Legendre in t = cos(xi), ascending xi; never touches the poles
        t, wt = legendre.leggauss(n)
        xi = np.arccos(t)[::-1]
        w = wt[::-1] / np.sin(xi)
        return xi, w
    if kind == "midpoint":
        h = (hi - lo) / n
        return lo + (np.arange(n) + 0.5) * h, np.full(n, h)
    if kind == "periodic":
        h = (hi - lo) / n
        return lo + np.arange(n) * h, np.full(n, h)
    if kind == "gauss":
        t, wt = legendre.leggauss(n)
        return lo + (t + 1) * (hi - lo) / 2, wt * (hi - lo) / 2
    raise ValueError(kind)


@dataclass(frozen=True, eq=False)
class SurfaceQuadrature:
    """Tensor-product node set on a parametric surface.

    Nodes are stored as parallel arrays ordered by (chart, xi-index,
    theta-index).  ``tangents[:, 0]`` is the unit vector along ``X_xi`` and
    ``tangents[:, 1] = n x tangents[:, 0]`` completes an orthonormal frame.
    """

    surface: ParametricSurface
    resolution: int
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    tau: np.ndarray
    metric: np.ndarray
    tangents: np.ndarray
    chart_id: np.ndarray
    params: np.ndarray
    X_xi: np.ndarray
    X_theta: np.ndarray
    spacing: np.ndarray
    grids: tuple  # per chart: (xi nodes, theta nodes)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def area(self) -> float:
        return float(np.sum(self.weights))

    @property
    def sqrt_g(self) -> np.ndarray:
        G = self.metric
        return np.sqrt(G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] ** 2)

    @property
    def circumradius(self) -> float:
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def inner(self, a, b) -> float:
        """Weighted discrete inner product ``sum a_i b_i w_i``."""
        return float(np.sum(np.asarray(a) * np.asarray(b) * self.weights))

    def norm(self, a) -> float:
        return math.sqrt(max(self.inner(a, a), 0.0))

    def check(self, values, name: str = "field") -> np.ndarray:
        """Return ``values`` as an array after checking it lives on this quadrature."""
        owner = getattr(values, "quadrature", None)
        if owner is not None and owner is not self:
            raise QuadratureMismatchError(f"{name} is bound to a different quadrature")
        arr = np.asarray(values, dtype=float)
        if arr.shape[0] != self.size:
            raise QuadratureMismatchError(f"{name} has {arr.shape[0]} entries, quadrature has {self.size} nodes")
        return arr

    @cached_property
    def differences(self) -> "_GridDifferences":
        return _GridDifferences(self)


def build_quadrature(surface: ParametricSurface, resolution: int) -> SurfaceQuadrature:
    """Tensor-product quadrature with ``resolution`` nodes in each chart direction.

    Spherical-type charts use Gauss-Legendre nodes in ``cos(xi)`` and the
    periodic trapezoid rule in ``theta``, so no node sits on a pole.
    ``resolution`` must be an even integer >= 8 (the pole and fold seams pair
    ``theta`` with ``theta + pi`` or ``-theta``).
    """
    if int(resolution) != resolution or resolution < MIN_RESOLUTION:
        raise ConfigurationError(f"resolution must be an integer >= {MIN_RESOLUTION}")
    n = int(resolution)
    if n % 2:
        raise ConfigurationError("resolution must be even")
    parts = []
    for cid, ch in enumerate(surface.charts):
        xi, wxi = _rule(ch.xi_rule, *ch.xi_range, n)
        th, wth = _rule(ch.theta_rule, *ch.theta_range, n)
        XI, TH = np.meshgrid(xi, th, indexing="ij")
        ev = ch.evaluate(XI.ravel(), TH.ravel())
        cr = ev.cross
        jac = np.linalg.norm(cr, axis=1)
        nrm = ch.orientation * cr / jac[:, None]
        E = np.einsum("ij,ij->i", ev.X_xi, ev.X_xi)
        F = np.einsum("ij,ij->i", ev.X_xi, ev.X_theta)
        G = np.einsum("ij,ij->i", ev.X_theta, ev.X_theta)
        e = np.einsum("ij,ij->i", ev.X_xixi, nrm)
        f = np.einsum("ij,ij->i", ev.X_xitheta, nrm)
        g = np.einsum("ij,ij->i", ev.X_thetatheta, nrm)
        tau = (e * G - 2 * f * F + g * E) / (2 * (E * G - F * F))
        t1 = ev.X_xi / np.sqrt(E)[:, None]
        t2 = np.cross(nrm, t1)
        metric = np.stack([np.stack([E, F], -1), np.stack([F, G], -1)], -2)
        # local parameter spacing (gap to neighbours) mapped to lengths
        gaps = np.diff(xi)
        dxi = np.empty(n)
        dxi[1:-1] = 0.5 * (gaps[1:] + gaps[:-1])
        dxi[0], dxi[-1] = gaps[0], gaps[-1]
        dth = wth if ch.theta_rule == "periodic" else np.gradient(th)
        DXI, DTH = np.meshgrid(dxi, dth, indexing="ij")
        spacing = np.maximum(np.sqrt(E) * DXI.ravel(), np.sqrt(G) * DTH.ravel())
        parts.append(
            dict(
                points=ev.X,
                normals=nrm,
                weights=np.outer(wxi, wth).ravel() * jac,
                tau=tau,
                metric=metric,
                tangents=np.stack([t1, t2], axis=1),
                chart_id=np.full(n * n, cid),
                params=np.stack([XI.ravel(), TH.ravel()], axis=1),
                X_xi=ev.X_xi,
                X_theta=ev.X_theta,
                spacing=spacing,
                grid=(xi, th),
            )
        )
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0] if k != "grid"}
    return SurfaceQuadrature(surface, n, grids=tuple(p["grid"] for p in parts), **cat)


# ---------------------------------------------------------------------------
# Pointwise geometry
# ---------------------------------------------------------------------------


def mean_curvature(surface: ParametricSurface, xi, theta, chart: int = 0):
    """Mean curvature ``tau`` (outward normal, ``tau = -1/R`` on spheres).

    Raises :class:`EvaluationError` outside the open chart domain or where
    the chart degenerates.
    """
    ch = surface.charts[chart]
    xi_a = np.atleast_1d(np.asarray(xi, dtype=float))
    th_a = np.broadcast_to(np.atleast_1d(np.asarray(theta, dtype=float)), xi_a.shape)
    lo, hi = ch.xi_range
    if np.any(xi_a <= lo) or np.any(xi_a >= hi) if ch.seam else np.any((xi_a < lo) | (xi_a > hi)):
        raise EvaluationError("parameter outside the open chart domain")
    ev = ch.evaluate(xi_a, th_a)
    cr = ev.cross
    jac = np.linalg.norm(cr, axis=1)
    scale = np.linalg.norm(ev.X_xi, axis=1) * np.linalg.norm(ev.X_theta, axis=1)
    if np.any(jac <= 1e-12 * np.maximum(scale, 1e-300)) or np.any(scale == 0):
        raise EvaluationError("chart is degenerate at the requested parameter")
    nrm = ch.orientation * cr / jac[:, None]
    E = np.einsum("ij,ij->i", ev.X_xi, ev.X_xi)
    F = np.einsum("ij,ij->i", ev.X_xi, ev.X_theta)
    G = np.einsum("ij,ij->i", ev.X_theta, ev.X_theta)
    e = np.einsum("ij,ij->i", ev.X_xixi, nrm)
    f = np.einsum("ij,ij->i", ev.X_xitheta, nrm)
    g = np.einsum("ij,ij->i", ev.X_thetatheta, nrm)
    tau = (e * G - 2 * f * F + g * E) / (2 * (E * G - F * F))
    return float(tau[0]) if np.ndim(xi) == 0 else tau


def perturb_surface(surface: ParametricSurface, profile: Profile, eps: float) -> ParametricSurface:
    """Surface ``{x + eps h(x) n(x)}`` with analytically differentiated charts.

    The immersion margin ``|eps h tau| < 1/2`` is checked on a 64 x 64
    sample of every chart.
    """
    eps = float(eps)
    if not math.isfinite(eps):
        raise ConfigurationError("eps must be finite")
    if eps != 0.0 and not profile.is_zero:
        q = build_quadrature(surface, 64)
        margin = np.max(np.abs(eps * profile(q.points) * q.tau))
        if margin >= 0.5:
            raise PerturbationTooLargeError(f"|eps h tau| reaches {margin:.3g} (must stay below 0.5)")
    charts = tuple(ch.perturbed(profile, eps) for ch in surface.charts)
    return ParametricSurface(
        f"{surface.name}~", surface.params, charts, surface.closed, base=surface, profile=profile, eps=eps
    )


@dataclass(frozen=True, eq=False)
class PerturbationField:
    """Nodal values of ``h`` and of its tangential gradient on a quadrature."""

    quadrature: SurfaceQuadrature
    h: np.ndarray
    grad_T_h: np.ndarray
    profile: Profile

    @property
    def is_zero(self) -> bool:
        return self.profile.is_zero


def perturbation_field(quadrature: SurfaceQuadrature, profile: Profile) -> PerturbationField:
    """Sample ``h`` and ``(I - n n^T) grad h`` at the quadrature nodes."""
    if profile.is_zero:
        z = np.zeros(quadrature.size)
        return PerturbationField(quadrature, z, np.zeros((quadrature.size, 3)), profile)
    h = profile(quadrature.points)
    g = profile.gradient(quadrature.points)
    n = quadrature.normals
    gT = g - np.einsum("ij,ij->i", g, n)[:, None] * n
    return PerturbationField(quadrature, h, gT, profile)


def normal_expansion(field_: PerturbationField, index=None):
    """First-order expansion of the perturbed normal, ``n_eps = n0 + eps n1``.

    Returns ``(n0, n1)`` with ``n1 = -grad_T h`` at the requested node(s)
    (all nodes when ``index`` is None).
    """
    q = field_.quadrature
    sel = slice(None) if index is None else index
    return q.normals[sel], -field_.grad_T_h[sel]


def area_element_expansion(field_: PerturbationField, index=None):
    """First-order expansion of the area element, ``sigma_eps = 1 + eps sigma1``
    with ``sigma1 = -2 h tau``."""
    q = field_.quadrature
    sel = slice(None) if index is None else index
    s1 = -2.0 * field_.h[sel] * q.tau[sel]
    return np.ones_like(np.asarray(s1, dtype=float)), s1


# ---------------------------------------------------------------------------
# Finite differences on the parameter grid
# ---------------------------------------------------------------------------


def _three_point(xm, x0, xp):
    # weights of f(xm), f(x0), f(xp) for f'(x0) on a nonuniform stencil
    hm, hp = x0 - xm, xp - x0
    a = -hp / (hm * (hm + hp))
    c = hm / (hp * (hm + hp))
    return a, -(a + c), c


def _one_sided(x0, x1, x2):
    # f'(x0) from f(x0), f(x1), f(x2) (exact for quadratics)
    h1, h2 = x1 - x0, x2 - x0
    b = h2 / (h1 * (h2 - h1))
    c = -h1 / (h2 * (h2 - h1))
    return -(b + c), b, c


class _GridDifferences:
    """Sparse first-derivative matrices on each chart's (xi, theta) grid."""

    def __init__(self, quad: SurfaceQuadrature):
        blocks_xi, blocks_flux, blocks_th = [], [], []
        for ch, (xi, th) in zip(quad.surface.charts, quad.grids):
            blocks_xi.append(self._xi_matrix(ch, xi, len(th), 1))
            blocks_flux.append(self._xi_matrix(ch, xi, len(th), ch.flux_parity))
            blocks_th.append(self._theta_matrix(ch, th, len(xi)))
        self.d_xi = sp.block_diag(blocks_xi, format="csr")
        self.d_xi_flux = sp.block_diag(blocks_flux, format="csr")
        self.d_theta = sp.block_diag(blocks_th, format="csr")
        G = quad.metric
        det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] ** 2
        self.inv_metric = np.stack(
            [np.stack([G[:, 1, 1], -G[:, 0, 1]], -1), np.stack([-G[:, 0, 1], G[:, 0, 0]], -1)], -2
        ) / det[:, None, None]
        self.sqrt_g = np.sqrt(det)
        self.quad = quad

    @staticmethod
    def _image(ch: Chart, j: int, m: int) -> int:
        if ch.seam == "pole":
            return (j + m // 2) % m
        return (m - j) % m  # fold: theta -> -theta on a grid symmetric about 0

    def _xi_matrix(self, ch: Chart, xi, m: int, parity: int):
        n = len(xi)
        rows, cols, vals = [], [], []

        def idx(k, j):
            return k * m + j

        lo, hi = ch.xi_range
        for k in range(n):
            for j in range(m):
                r = idx(k, j)
                if 0 < k < n - 1:
                    a, b, c = _three_point(xi[k - 1], xi[k], xi[k + 1])
                    entries = [(idx(k - 1, j), a), (r, b), (idx(k + 1, j), c)]
                elif ch.seam is None:
                    if k == 0:
                        a, b, c = _one_sided(xi[0], xi[1], xi[2])
                        entries = [(r, a), (idx(1, j), b), (idx(2, j), c)]
                    else:
                        a, b, c = _one_sided(xi[-1], xi[-2], xi[-3])
                        entries = [(r, a), (idx(n - 2, j), b), (idx(n - 3, j), c)]
                elif k == 0:
                    ghost = 2 * lo - xi[0]
                    a, b, c = _three_point(ghost, xi[0], xi[1])
                    entries = [(idx(0, self._image(ch, j, m)), parity * a), (r, b), (idx(1, j), c)]
                else:
                    ghost = 2 * hi - xi[-1]
                    a, b, c = _three_point(xi[-2], xi[-1], ghost)
                    entries = [(idx(n - 2, j), a), (r, b), (idx(n - 1, self._image(ch, j, m)), parity * c)]
                for col, v in entries:
                    rows.append(r)
                    cols.append(col)
                    vals.append(v)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n * m, n * m))

    @staticmethod
    def _theta_matrix(ch: Chart, th, n: int):
        m = len(th)
        if ch.theta_rule == "periodic":
            h = th[1] - th[0]
            D = sp.diags([-1.0, 1.0, -1.0, 1.0], [-1, 1, m - 1, -(m - 1)], shape=(m, m)) / (2 * h)
        else:
            rows, cols, vals = [], [], []
            for j in range(m):
                if 0 < j < m - 1:
                    w = _three_point(th[j - 1], th[j], th[j + 1])
                    c = (j - 1, j, j + 1)
                elif j == 0:
                    w = _one_sided(th[0], th[1], th[2])
                    c = (0, 1, 2)
                else:
                    w = _one_sided(th[-1], th[-2], th[-3])
                    c = (m - 1, m - 2, m - 3)
                rows += [j] * 3
                cols += list(c)
                vals += list(w)
            D = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
        return sp.kron(sp.identity(n), D, format="csr")

    def gradient_components(self, w):
        """Contravariant components ``G^{-1} (w_xi, w_theta)``."""
        wx = self.d_xi @ w
        wt = self.d_theta @ w
        Gi = self.inv_metric
        return Gi[:, 0, 0] * wx + Gi[:, 0, 1] * wt, Gi[:, 1, 0] * wx + Gi[:, 1, 1] * wt

    def divergence_matrix(self, weight):
        """Sparse matrix of ``w -> (1/sqrt g) div(weight sqrt g G^{-1} grad w)``."""
        s = weight * self.sqrt_g
        Gi = self.inv_metric
        Dx, Df, Dt = self.d_xi, self.d_xi_flux, self.d_theta
        diag = sp.diags
        M = Df @ (diag(s * Gi[:, 0, 0]) @ Dx + diag(s * Gi[:, 0, 1]) @ Dt)
        M = M + Dt @ (diag(s * Gi[:, 1, 0]) @ Dx + diag(s * Gi[:, 1, 1]) @ Dt)
        return (diag(1.0 / self.sqrt_g) @ M).tocsr()


def tangential_gradient(quadrature: SurfaceQuadrature, values) -> np.ndarray:
    """Surface gradient of a nodal field, as ambient 3-vectors in the tangent plane."""
    w = quadrature.check(values)
    if quadrature.resolution < 16:
        raise ConfigurationError("surface differential operators need resolution >= 16")
    gx, gt = quadrature.differences.gradient_components(w)
    return gx[:, None] * quadrature.X_xi + gt[:, None] * quadrature.X_theta


def weighted_laplace_beltrami(quadrature: SurfaceQuadrature, values, weight) -> np.ndarray:
    """``(1/sqrt g) div(weight sqrt g G^{-1} grad values)`` by grid differences."""
    w = quadrature.check(values)
    wt = quadrature.check(weight, "weight")
    if quadrature.resolution < 16:
        raise ConfigurationError("surface differential operators need resolution >= 16")
    return quadrature.differences.divergence_matrix(wt) @ w


def laplace_beltrami(quadrature: SurfaceQuadrature, values) -> np.ndarray:
    """Discrete Laplace-Beltrami operator of a nodal field."""
    return weighted_laplace_beltrami(quadrature, values, np.ones(quadrature.size))


# ---------------------------------------------------------------------------
# Resampling between resolutions (spherical-type charts)
# ---------------------------------------------------------------------------


def _lagrange_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # barycentric interpolation matrix from nodes src to points dst
    diff = src[:, None] - src[None, :]
    np.fill_diagonal(diff, 1.0)
    bw = 1.0 / np.prod(diff, axis=1)
    bw /= np.max(np.abs(bw))
    d = dst[:, None] - src[None, :]
    exact = np.isclose(d, 0.0, atol=1e-15)
    d[exact] = 1.0
    M = bw[None, :] / d
    M /= M.sum(axis=1, keepdims=True)
    rows = np.any(exact, axis=1)
    M[rows] = exact[rows].astype(float)
    return M


def resample(values, source: SurfaceQuadrature, target: SurfaceQuadrature) -> np.ndarray:
    """Spectrally interpolate a nodal field between two resolutions of the
    same single-chart spherical-type surface.

    Fourier modes in ``theta`` are interpolated in ``t = cos(xi)`` after
    removing the ``sin(xi)`` factor carried by odd azimuthal modes.
    """
    v = source.check(values)
    ch = source.surface.charts[0]
    if len(source.surface.charts) != 1 or ch.seam != "pole" or len(target.surface.charts) != 1:
        raise NotImplementedError("resampling is available for single spherical-type charts only")
    ns, nt = source.resolution, target.resolution
    xs, xt = source.grids[0][0], target.grids[0][0]
    coeff = np.fft.fft(v.reshape(ns, ns), axis=1) / ns
    modes = np.fft.fftfreq(ns, 1.0 / ns).astype(int)
    L = _lagrange_matrix(np.cos(xs), np.cos(xt))
    out = np.zeros((nt, nt), dtype=complex)
    for col, m in enumerate(modes):
        if abs(m) >= nt // 2 or abs(m) == ns // 2:
            continue
        c = coeff[:, col]
        if m % 2:
            c = L @ (c / np.sin(xs)) * np.sin(xt)
        else:
            c = L @ c
        out[:, m % nt] = c
    return np.real(np.fft.ifft(out * nt, axis=1)).ravel()
