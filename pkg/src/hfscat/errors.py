"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
GeometryError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class NumericalError(RuntimeError):
    """A numerical contract was violated (NaN, norm drift, non-convergence)."""


class GeometryError(ValueError):
    """Infeasible geometry: aliasing, transit violation, overlapping bands."""
