"""Periodic box discretization, unitary Fourier transform, and probe fields.

Conventions (fixed once for the whole package):

* Position lattice per axis: ``x_m = -L + m*h`` for ``m = 0..M-1`` with
  ``h = 2L/M``; the box is ``[-L, L)^n``.
* Frequency lattice per axis: ``xi_k = k * dxi`` for ``k = -M/2..M/2-1``
  with ``dxi = pi/L``, stored in ascending order.
* Fourier transform is unitary with kernel ``exp(-i x.xi)``:
  ``(Ff)(xi) = (2*pi)^(-n/2) * integral exp(-i x.xi) f(x) dx``,
  realized on the lattice as ``(2*pi)^(-n/2) * h^n * DFT`` (plus index
  shuffles).  Plancherel then holds exactly:
  ``h^n sum|f|^2 == dxi^n sum|Ff|^2``.
* Convolution carries the explicit constant:
  ``F(f*g) = (2*pi)^(n/2) * (Ff)(Fg)``.
* Inner products conjugate the second argument:
  ``<f, g> = vol * sum f * conj(g)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import GeometryError

POSITION = "position"
FREQUENCY = "frequency"

#: tolerance for "lattice-exact" checks (velocities, translations)
LATTICE_TOL = 1e-9


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[-L, L)^n`` with its dual lattice."""

    dim: int
    points_per_axis: int
    half_extent: float

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise GeometryError(f"dim must be 1, 2 or 3, got {self.dim}")
        if not _is_power_of_two(self.points_per_axis) or self.points_per_axis < 16:
            raise GeometryError(
                f"points_per_axis must be a power of two >= 16, got {self.points_per_axis}"
            )
        if not (self.half_extent > 0):
            raise GeometryError(f"half_extent must be positive, got {self.half_extent}")

    @property
    def spacing(self) -> float:
        """h = 2L/M."""
        return 2.0 * self.half_extent / self.points_per_axis

    @property
    def dual_spacing(self) -> float:
        """dxi = pi/L."""
        return math.pi / self.half_extent

    @property
    def nyquist(self) -> float:
        """xi_max = pi*M/(2L)."""
        return math.pi * self.points_per_axis / (2.0 * self.half_extent)

    @property
    def shape(self):
        return (self.points_per_axis,) * self.dim

    @property
    def npoints(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def dual_cell_volume(self) -> float:
        return self.dual_spacing**self.dim

    def axis_coords(self) -> np.ndarray:
        m = np.arange(self.points_per_axis)
        return -self.half_extent + m * self.spacing

    def axis_freqs(self) -> np.ndarray:
        m = self.points_per_axis
        k = np.arange(m) - m // 2
        return k * self.dual_spacing

    def coord_mesh(self):
        """Sparse (broadcastable) position meshes, axis order x1..xn."""
        ax = self.axis_coords()
        return np.meshgrid(*([ax] * self.dim), indexing="ij", sparse=True)

    def freq_mesh(self):
        ax = self.axis_freqs()
        return np.meshgrid(*([ax] * self.dim), indexing="ij", sparse=True)

    def radius2_position(self) -> np.ndarray:
        mesh = self.coord_mesh()
        out = np.zeros(self.shape)
        for c in mesh:
            out = out + c**2
        return out

    def radius2_freq(self) -> np.ndarray:
        mesh = self.freq_mesh()
        out = np.zeros(self.shape)
        for c in mesh:
            out = out + c**2
        return out

    def lattice_shift(self, v) -> tuple[int, ...]:
        """Integer lattice indices of a frequency vector v, or raise."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if v.shape != (self.dim,):
            raise GeometryError(f"velocity must have {self.dim} components, got {v.shape}")
        k = v / self.dual_spacing
        ik = np.rint(k)
        if np.max(np.abs(k - ik)) > LATTICE_TOL:
            raise GeometryError(
                f"vector {v.tolist()} is not on the frequency lattice (dxi={self.dual_spacing})"
            )
        return tuple(int(i) for i in ik)


def make_grid(dim: int, points_per_axis: int, half_extent: float) -> Grid:
    return Grid(dim, points_per_axis, float(half_extent))


@dataclass(frozen=True)
class Field:
    """Complex-valued function on a Grid, in position or frequency form.

    Values are stored row-major with axis order x1..xn and are frozen
    after construction; operations return new Fields.
    """

    grid: Grid
    representation: str
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        if self.representation not in (POSITION, FREQUENCY):
            raise ValueError(f"bad representation {self.representation!r}")
        vals = np.asarray(self.values, dtype=np.complex128)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(vals.view(np.float64))):
            raise ValueError("field values must be finite")
        vals = np.ascontiguousarray(vals)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def volume_element(self) -> float:
        if self.representation == POSITION:
            return self.grid.cell_volume
        return self.grid.dual_cell_volume

    def norm(self) -> float:
        from . import accel

        return math.sqrt(self.volume_element * accel.sum_abs2(self.values))

    def inner(self, other: "Field") -> complex:
        """<self, other> with conjugation on the second argument."""
        from . import accel

        if other.grid != self.grid or other.representation != self.representation:
            raise ValueError("inner product requires matching grid and representation")
        return self.volume_element * accel.dot_conj(self.values, other.values)

    def with_values(self, values, label=None) -> "Field":
        return Field(self.grid, self.representation, values,
                     self.label if label is None else label)


def fourier(f: Field) -> Field:
    """Unitary forward transform; requires a position-representation field."""
    if f.representation != POSITION:
        raise ValueError("fourier expects a position-representation field")
    g = f.grid
    scale = (2.0 * math.pi) ** (-g.dim / 2.0) * g.cell_volume
    vals = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(f.values))) * scale
    return Field(g, FREQUENCY, vals, f.label)


def inverse_fourier(f: Field) -> Field:
    """Unitary inverse transform; requires a frequency-representation field."""
    if f.representation != FREQUENCY:
        raise ValueError("inverse_fourier expects a frequency-representation field")
    g = f.grid
    # ifftn carries 1/M^n, so the net factor is (2pi)^(-n/2) * dxi^n * M^n
    scale = (2.0 * math.pi) ** (-g.dim / 2.0) * g.dual_cell_volume * g.npoints
    vals = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(f.values))) * scale
    return Field(g, POSITION, vals, f.label)


def to_frequency(f: Field) -> Field:
    return f if f.representation == FREQUENCY else fourier(f)


def to_position(f: Field) -> Field:
    return f if f.representation == POSITION else inverse_fourier(f)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSpec:
    """Band-limited probe: smooth compact bump in frequency space.

    The realized spectrum is
    ``A * s^(-n) * g(|xi/s - p| / eps)`` with ``s = 1 + dilation`` and
    ``g(r) = exp(-m r^2 / (1 - r^2))`` for ``r < 1``, zero outside, so the
    support is exactly the ball of radius ``s*eps`` around ``s*p`` on the
    lattice.  ``A`` is chosen so the undilated probe has L2 norm equal to
    ``amplitude``; dilation then scales the norm by ``s^(-n/2)``.
    """

    center_freq: tuple
    band_radius: float
    smoothness_order: int = 6
    amplitude: float = 1.0
    velocity: tuple = ()
    dilation: float = 0.0

    def __post_init__(self):
        p = tuple(float(c) for c in np.atleast_1d(self.center_freq))
        v = tuple(float(c) for c in np.atleast_1d(self.velocity)) if len(
            np.atleast_1d(self.velocity)
        ) else tuple(0.0 for _ in p)
        object.__setattr__(self, "center_freq", p)
        object.__setattr__(self, "velocity", v)
        if self.band_radius <= 0:
            raise GeometryError("band_radius must be positive")
        if self.smoothness_order < 2:
            raise GeometryError("smoothness_order must be >= 2")
        if self.amplitude <= 0:
            raise GeometryError("amplitude must be positive")
        if self.dilation < 0:
            raise GeometryError("dilation must be >= 0")

    @property
    def dim(self) -> int:
        return len(self.center_freq)

    def center_norm(self) -> float:
        return float(np.linalg.norm(self.center_freq))

    def velocity_norm(self) -> float:
        return float(np.linalg.norm(self.velocity))

    def check_aliasing(self, grid: Grid):
        if self.dim != grid.dim:
            raise GeometryError(f"probe dim {self.dim} != grid dim {grid.dim}")
        s = 1.0 + self.dilation
        band = s * (self.center_norm() + self.band_radius)
        if band + self.velocity_norm() >= grid.nyquist:
            raise GeometryError(
                f"probe band {band:.4g} plus velocity {self.velocity_norm():.4g} "
                f"exceeds nyquist {grid.nyquist:.4g}"
            )


def _bump_profile(r2: np.ndarray, order: int) -> np.ndarray:
    """g(r)^ with g = exp(-m r^2/(1-r^2)) on r<1, 0 outside; r2 = r^2."""
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    q = r2[inside]
    out[inside] = np.exp(-order * q / (1.0 - q))
    return out


def make_band_limited_profile(grid: Grid, probe: ProbeSpec) -> Field:
    """Realize a probe as a frequency-representation Field.

    The construction evaluates the dilated bump analytically, so the
    spectral support is exact for every dilation and
    ``|phi_lambda|^ (xi) = s^(-n) |phi|^ (xi/s)`` holds by construction.
    The modulation (velocity) is *not* applied here; use :func:`modulate`.
    """
    probe.check_aliasing(grid)
    s = 1.0 + probe.dilation
    mesh = grid.freq_mesh()
    r2 = np.zeros(grid.shape)
    for c, p in zip(mesh, probe.center_freq):
        r2 = r2 + (c / s - p) ** 2
    r2 /= probe.band_radius**2
    base = _bump_profile(r2, probe.smoothness_order)

    # normalization constant from the undilated bump on the same grid
    r2_0 = np.zeros(grid.shape)
    for c, p in zip(mesh, probe.center_freq):
        r2_0 = r2_0 + (c - p) ** 2
    r2_0 /= probe.band_radius**2
    bump0 = _bump_profile(r2_0, probe.smoothness_order)
    norm0 = math.sqrt(grid.dual_cell_volume * float(np.sum(bump0**2)))
    if norm0 == 0.0:
        raise GeometryError("probe band is unresolved by the grid (no lattice nodes inside)")
    amp = probe.amplitude / norm0

    vals = (amp * s ** (-grid.dim)) * base
    return Field(grid, FREQUENCY, vals.astype(np.complex128), label="probe")


def spectral_mass_outside_ball(f: Field, center, radius: float) -> float:
    """Fraction of spectral mass outside the ball B_radius(center)."""
    fh = to_frequency(f)
    mesh = f.grid.freq_mesh()
    r2 = np.zeros(f.grid.shape)
    for c, p in zip(mesh, np.atleast_1d(center)):
        r2 = r2 + (c - p) ** 2
    mass = np.abs(fh.values) ** 2
    total = float(np.sum(mass))
    if total == 0.0:
        return 0.0
    outside = float(np.sum(mass[r2 > radius**2]))
    return outside / total


def modulate(f: Field, v) -> Field:
    """Phi_v(x) = exp(i v.x) phi(x) as an exact spectral shift.

    v must lie on the frequency lattice; spectral content that would wrap
    past the Nyquist edge raises GeometryError.
    """
    g = f.grid
    shift = g.lattice_shift(v)
    fh = to_frequency(f)
    vals = fh.values
    total = float(np.sum(np.abs(vals) ** 2))
    out = vals
    for axis, k in enumerate(shift):
        if k == 0:
            continue
        # mass that would wrap around the band edge
        sl = [slice(None)] * g.dim
        if k > 0:
            sl[axis] = slice(g.points_per_axis - k, None)
        else:
            sl[axis] = slice(None, -k)
        wrapped = float(np.sum(np.abs(out[tuple(sl)]) ** 2))
        if total > 0 and wrapped > 1e-24 * total:
            raise GeometryError(
                f"modulation by {v} aliases: {wrapped/total:.3e} of spectral mass wraps"
            )
        out = np.roll(out, k, axis=axis)
    result = Field(g, FREQUENCY, out, f.label)
    return result if f.representation == FREQUENCY else inverse_fourier(result)


def translate(f: Field, displacement) -> Field:
    """phi(x - d) for a displacement that is a whole number of cells."""
    g = f.grid
    d = np.atleast_1d(np.asarray(displacement, dtype=float))
    cells = d / g.spacing
    icells = np.rint(cells)
    if np.max(np.abs(cells - icells)) > LATTICE_TOL:
        raise GeometryError(f"displacement {d.tolist()} is not a whole number of cells")
    fp = to_position(f)
    out = fp.values
    for axis, k in enumerate(int(i) for i in icells):
        if k:
            out = np.roll(out, k, axis=axis)
    result = Field(g, POSITION, out, f.label)
    return result if f.representation == POSITION else fourier(result)


def dilate(f: Field, lam: float) -> Field:
    """phi_lambda(x) = phi((1+lambda)x) by exact trigonometric interpolation.

    Separable zoomed inverse transform: exact for the band-limited lattice
    function phi.  The result is only alias-free when the dilated band
    stays under Nyquist; this is checked via the spectral mass of f.
    """
    if lam < 0:
        raise GeometryError("dilation parameter must be >= 0")
    g = f.grid
    s = 1.0 + lam
    fh = to_frequency(f)
    if lam == 0.0:
        return f if f.representation == POSITION else to_position(f)

    # alias check: mass at |xi_d| > nyquist/s must be negligible
    ax_f = g.axis_freqs()
    mass = np.abs(fh.values) ** 2
    total = float(np.sum(mass))
    limit = g.nyquist / s
    for axis in range(g.dim):
        sel = np.abs(ax_f) > limit
        if not np.any(sel):
            continue
        m = float(np.sum(np.take(mass, np.nonzero(sel)[0], axis=axis)))
        if total > 0 and m > 1e-12 * total:
            raise GeometryError(
                f"dilation by {lam} pushes band past nyquist (axis {axis}: "
                f"{m/total:.3e} of mass beyond {limit:.4g})"
            )

    x = g.axis_coords()
    pref = (2.0 * math.pi) ** (-0.5) * g.dual_spacing
    zoom = pref * np.exp(1j * s * np.outer(x, ax_f))  # [m, k] per axis
    vals = fh.values
    for _ in range(g.dim):
        # contract last axis with zoom^T, cycling axes to preserve order
        vals = np.tensordot(vals, zoom, axes=([g.dim - 1], [1]))
        vals = np.moveaxis(vals, -1, 0)
    # the interpolant is 2L-periodic: beyond |x| = L/s the argument (1+lam)x
    # leaves the fundamental domain and would alias a wrapped copy in; the
    # dilated function is zero there up to the decay tail of f
    keep = np.abs(s * x) < g.half_extent
    vals = vals.copy()
    for axis in range(g.dim):
        shp = [1] * g.dim
        shp[axis] = g.points_per_axis
        vals *= keep.reshape(shp)
    result = Field(g, POSITION, vals, f.label)
    return result if f.representation == POSITION else fourier(result)


# ---------------------------------------------------------------------------
# serialization: raw interleaved little-endian float64 + JSON sidecar
# ---------------------------------------------------------------------------


def save_field(f: Field, path_base: str) -> tuple[str, str]:
    raw = np.ascontiguousarray(f.values, dtype="<c16").tobytes()
    bin_path = path_base + ".bin"
    with open(bin_path, "wb") as fh:
        fh.write(raw)
    sidecar = {
        "dim": f.grid.dim,
        "M": f.grid.points_per_axis,
        "L": f.grid.half_extent,
        "representation": f.representation,
        "label": f.label,
        "sha256": hashlib.sha256(raw).hexdigest(),
    }
    json_path = path_base + ".json"
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return bin_path, json_path


def load_field(path_base: str) -> Field:
    with open(path_base + ".json") as fh:
        meta = json.load(fh)
    with open(path_base + ".bin", "rb") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != meta["sha256"]:
        raise ValueError(f"checksum mismatch for {path_base}.bin")
    g = make_grid(meta["dim"], meta["M"], meta["L"])
    vals = np.frombuffer(raw, dtype="<c16").reshape(g.shape)
    return Field(g, meta["representation"], vals, meta.get("label", ""))
