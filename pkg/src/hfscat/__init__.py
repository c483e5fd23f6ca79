"""hfscat: forward and inverse scattering for Hartree / Hartree-Fock systems.

Numerical realization of high-velocity scattering pairings for mean-field
(Hartree, Hartree-Fock) nonlinear Schroedinger systems, assembly of the
associated first-kind integral kernels, and regularized reconstruction of
the two-body interaction's Fourier transform from pairing data.
"""

from .grid import (
    Grid,
    Field,
    ProbeSpec,
    make_grid,
    fourier,
    inverse_fourier,
    make_band_limited_profile,
    modulate,
    dilate,
)
from .propagator import free_propagate, galilean_check
from .dynamics import PotentialSpec, OrbitalSet, hartree_term, fock_term, evolve
from .errors import ConfigError, NumericalError, GeometryError

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "Field",
    "ProbeSpec",
    "PotentialSpec",
    "OrbitalSet",
    "make_grid",
    "fourier",
    "inverse_fourier",
    "make_band_limited_profile",
    "modulate",
    "dilate",
    "free_propagate",
    "galilean_check",
    "hartree_term",
    "fock_term",
    "evolve",
    "ConfigError",
    "NumericalError",
    "GeometryError",
]
