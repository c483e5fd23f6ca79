"""Free Schroedinger group U0(t) = exp(-i t H0), H0 = -(1/2) Laplacian.

Realized as the exact Fourier multiplier exp(-i t |xi|^2 / 2) on the dual
lattice, so unitarity and the group law hold to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import accel
from .errors import GeometryError, NumericalError
from .grid import (
    FREQUENCY,
    POSITION,
    Field,
    Grid,
    fourier,
    inverse_fourier,
    modulate,
    to_frequency,
    translate,
)


@dataclass(frozen=True)
class PropagationPlan:
    """Cached unit-modulus multiplier exp(-i t |xi|^2 / 2) for one (grid, t)."""

    grid: Grid
    t: float
    multiplier: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.multiplier)
        vals.flags.writeable = False
        object.__setattr__(self, "multiplier", vals)


def make_plan(grid: Grid, t: float) -> PropagationPlan:
    phase = 0.5 * t * grid.radius2_freq()
    return PropagationPlan(grid, float(t), np.exp(-1j * phase))


def free_propagate(f: Field, t, plan: PropagationPlan | None = None) -> Field:
    """Apply U0(t); the result keeps the input representation."""
    if plan is None:
        plan = make_plan(f.grid, t)
    elif plan.grid != f.grid or plan.t != t:
        raise ValueError("propagation plan does not match field/time")
    fh = to_frequency(f)
    out = Field(f.grid, FREQUENCY, fh.values * plan.multiplier, f.label)
    if f.representation == POSITION:
        return inverse_fourier(out)
    return out


def kinetic_phase(grid: Grid, t: float) -> np.ndarray:
    """The real phase t*|xi|^2/2 on the ascending dual lattice."""
    return 0.5 * t * grid.radius2_freq()


def galilean_check(phi: Field, v, s: float) -> float:
    """Max pointwise defect of the boosted free-evolution identity.

    Compares U0(s) applied to the modulated probe against
    exp(i(v.x - |v|^2 s/2)) * (U0(s) phi)(x - v s).  Requires v on the
    frequency lattice and v*s a whole number of cells so the translation
    is lattice-exact.
    """
    g = phi.grid
    v = np.atleast_1d(np.asarray(v, dtype=float))
    vs = v * s
    cells = vs / g.spacing
    if np.max(np.abs(cells - np.rint(cells))) > 1e-9:
        raise GeometryError(f"displacement v*s = {vs.tolist()} is off-lattice")

    lhs = free_propagate(modulate(phi, v), s)
    moved = translate(free_propagate(phi, s), vs)
    mesh = g.coord_mesh()
    phase = np.zeros(g.shape)
    for c, vi in zip(mesh, v):
        phase = phase + vi * c
    phase = phase - 0.5 * float(v @ v) * s
    rhs_vals = np.exp(1j * phase) * moved.values

    lhs_pos = lhs if lhs.representation == POSITION else inverse_fourier(lhs)
    return float(np.max(np.abs(lhs_pos.values - rhs_vals)))


def mass_outside_box(f: Field, fraction: float = 0.5) -> float:
    """Fraction of L2 mass outside [-fraction*L, fraction*L)^n."""
    fp = f if f.representation == POSITION else inverse_fourier(f)
    g = f.grid
    lim = fraction * g.half_extent
    ax = g.axis_coords()
    outside = (ax < -lim) | (ax >= lim)
    mask = np.zeros(g.shape, dtype=bool)
    for axis in range(g.dim):
        shape = [1] * g.dim
        shape[axis] = g.points_per_axis
        mask |= outside.reshape(shape)
    total = accel.sum_abs2(fp.values)
    if total == 0.0:
        return 0.0
    return accel.masked_sum_abs2(fp.values, mask) / total


def check_containment(f: Field, fraction: float = 0.5, tol: float = 1e-6):
    """Raise NumericalError when too much mass has left the safe box."""
    out = mass_outside_box(f, fraction)
    if out > tol:
        raise NumericalError(
            f"{out:.3e} of the mass lies outside the safe box "
            f"(fraction={fraction}, tol={tol:.1e}); shrink the horizon or enlarge the box"
        )
    return out
