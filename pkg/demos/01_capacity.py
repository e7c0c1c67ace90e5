"""Capacity of a conductor from the first-kind single-layer equation.

We solve S[phi] = 1 on the surface, read the capacity off the total charge,
and compare with the closed forms for a sphere and an ellipsoid.  A short
resolution sweep then shows how quickly the discrete capacity converges.

Run from the repository root:  python3 demos/01_capacity.py
"""

import numpy as np

from capsense.cli import convergence_study
from capsense.geometry import build_quadrature, make_surface
from capsense.oracle import ellipsoid_capacity
from capsense.solver import eval_potential, far_field_coefficient, solve_equilibrium

# %% A unit sphere: the capacity (in units where cap = R) should be 1.
sphere = make_surface("sphere", 1.0)
eq = solve_equilibrium(build_quadrature(sphere, 32))
print(f"sphere(1)   capacity {eq.capacity:.8f}   (exact 1)")
print(f"            condition estimate of S: {eq.condition:.1f}")

# %% The same number appears as the 1/|x| coefficient of the potential.
for r in (100.0, 1000.0):
    print(f"            |x| u(x) at |x| = {r:g}: {far_field_coefficient(eq, r):.8f}")

# %% A triaxial ellipsoid against the elliptic-integral reference.
ell = make_surface("ellipsoid", 2.0, 1.0, 0.5)
eq_ell = solve_equilibrium(build_quadrature(ell, 32))
ref = ellipsoid_capacity(2.0, 1.0, 0.5)
print(f"\nellipsoid(2,1,0.5) capacity {eq_ell.capacity:.8f}   reference {ref:.8f}")
print(f"            relative error {abs(eq_ell.capacity - ref) / ref:.2e}")

# %% The potential itself: 1 on the surface, decaying like cap/|x|.
for d in (2.5, 5.0, 20.0):
    x = d * np.array([0.0, 0.6, 0.8])
    print(f"            u at distance {d:5.1f}: {float(eval_potential(eq_ell, x)):.6f}")

# %% Resolution sweep.  The error falls like n^-3 once the grid resolves the shape
# (very coarse grids can land close to the answer by accident, so start at 32).
rep = convergence_study("ellipsoid:2,1,0.5", [32, 48, 64])
print("\nresolution   capacity        rel. error")
for n, cap, err in rep.tables["convergence"]["rows"]:
    print(f"{n:10d}   {cap:.10f}   {err:.2e}")
print(f"observed rate {rep.results['rate']:.2f}  -> {rep.verdicts['convergence']}")
