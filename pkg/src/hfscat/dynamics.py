"""Split-step spectral integrator for the mean-field systems.

Models:

* ``rh``      -- single orbital, i u_t = H0 u + (V*|u|^2) u
* ``hartree`` -- N orbitals, i u_j,t = H0 u_j + (V * sum_{k!=j} |u_k|^2) u_j
* ``hf``      -- hartree plus the nonlocal exchange term
  -sum_{k!=j} u_k(x) (V * (conj(u_k) u_j))(x)

Strang splitting: half kinetic / full nonlinear / half kinetic.  The
Hartree multiplier is real and invariant during the nonlinear sub-step,
so that sub-step is an exact phase rotation.  The exchange sub-step
freezes the (Hermitian) mean-field generator at the midpoint and applies
the Cayley form of the implicit midpoint rule, which conserves each
orbital norm to the fixed-point solve tolerance.

Convolutions are spectral with the explicit constant
``V * rho = (2 pi)^(n/2) * F^-1( Vhat * rhohat )``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import accel
from .errors import ConfigError, GeometryError, NumericalError
from .grid import FREQUENCY, POSITION, Field, Grid, fourier, inverse_fourier, to_position

MODELS = ("rh", "hartree", "hf")

_FFT = np.fft.fftn
_IFFT = np.fft.ifftn


# ---------------------------------------------------------------------------
# potential
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialSpec:
    """Radial two-body interaction with a smooth compact cutoff.

    families:
      gaussian:          V(r) = amplitude * exp(-r^2 / (2 width^2))
      regularized_power: V(r) = amplitude * (1 + r^2)^(-exponent/2)
      table:             radial samples (radii, values), linear interpolation

    The grid realization is tapered to zero with a cosine^2 ramp on
    [cutoff_radius, cutoff_radius + taper_width]; the support must fit in
    B_{L/4}(0).  ``metadata`` records assumptions that are stored but not
    checked (decay exponent ranges, operator-compactness constants).
    """

    family: str
    amplitude: float
    width: float = 1.0
    exponent: float = 2.0
    cutoff_radius: float = 4.0
    taper_width: float = 1.0
    table_radii: tuple = ()
    table_values: tuple = ()
    metadata: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("gaussian", "regularized_power", "table"):
            raise ConfigError(f"unknown potential family {self.family!r}")
        if self.amplitude < 0:
            raise ConfigError("potential amplitude must be >= 0")
        if self.family == "gaussian" and self.width <= 0:
            raise ConfigError("gaussian width must be positive")
        if self.cutoff_radius <= 0 or self.taper_width <= 0:
            raise ConfigError("cutoff_radius and taper_width must be positive")
        if self.family == "table":
            r = np.asarray(self.table_radii, dtype=float)
            v = np.asarray(self.table_values, dtype=float)
            if r.size < 2 or r.size != v.size:
                raise ConfigError("table potential needs matching radii/values (>= 2)")
            if np.any(np.diff(r) <= 0):
                raise ConfigError("table radii must be strictly increasing")

    def radial(self, r: np.ndarray) -> np.ndarray:
        """Untapered radial profile."""
        r = np.asarray(r, dtype=float)
        if self.family == "gaussian":
            return self.amplitude * np.exp(-(r**2) / (2.0 * self.width**2))
        if self.family == "regularized_power":
            return self.amplitude * (1.0 + r**2) ** (-self.exponent / 2.0)
        return np.interp(r, self.table_radii, self.table_values, right=0.0)

    def check_shape(self, samples: int = 256):
        """V >= 0 and non-increasing on radial samples inside the cutoff."""
        r = np.linspace(0.0, self.cutoff_radius, samples)
        v = self.radial(r)
        if np.any(v < -1e-14):
            raise ConfigError("potential must be non-negative")
        if np.any(np.diff(v) > 1e-12 * max(1.0, float(np.max(np.abs(v))))):
            raise ConfigError("potential must be non-increasing in |x|")


@dataclass(frozen=True)
class Potential:
    """Grid realization of a PotentialSpec: tapered values and transform."""

    spec: PotentialSpec
    grid: Grid
    values: np.ndarray       # real, position representation
    hat: np.ndarray          # complex (real up to roundoff), ascending lattice

    def __post_init__(self):
        for name in ("values", "hat"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def support_radius(self) -> float:
        return self.spec.cutoff_radius + self.spec.taper_width

    def hat_field(self) -> Field:
        return Field(self.grid, FREQUENCY, self.hat, label="potential_hat")

    def position_field(self) -> Field:
        return Field(self.grid, POSITION, self.values.astype(np.complex128),
                     label="potential")


def realize_potential(spec: PotentialSpec, grid: Grid) -> Potential:
    spec.check_shape()
    support = spec.cutoff_radius + spec.taper_width
    if support > grid.half_extent / 4.0 + 1e-12:
        raise GeometryError(
            f"potential support {support:.3g} exceeds L/4 = {grid.half_extent/4:.3g}"
        )
    r = np.sqrt(grid.radius2_position())
    vals = spec.radial(r)
    ramp = np.clip((r - spec.cutoff_radius) / spec.taper_width, 0.0, 1.0)
    vals = vals * np.cos(0.5 * math.pi * ramp) ** 2
    vals[r >= support] = 0.0
    f = Field(grid, POSITION, vals.astype(np.complex128))
    hat = fourier(f).values
    return Potential(spec, grid, vals, hat)


# ---------------------------------------------------------------------------
# orbitals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrbitalSet:
    """Ordered orbitals u_1..u_N on one grid at a common time stamp."""

    orbitals: tuple
    time: float = 0.0

    def __post_init__(self):
        orbs = tuple(self.orbitals)
        if not orbs:
            raise ValueError("OrbitalSet needs at least one orbital")
        g = orbs[0].grid
        for o in orbs:
            if o.grid != g:
                raise ValueError("all orbitals must share one grid")
        object.__setattr__(self, "orbitals", orbs)

    @property
    def grid(self) -> Grid:
        return self.orbitals[0].grid

    def __len__(self):
        return len(self.orbitals)

    def __iter__(self):
        return iter(self.orbitals)

    def __getitem__(self, j):
        return self.orbitals[j]

    def norms(self):
        return [o.norm() for o in self.orbitals]

    def stack_position(self) -> np.ndarray:
        return np.stack([to_position(o).values for o in self.orbitals])

    @classmethod
    def from_stack(cls, grid: Grid, stack: np.ndarray, time: float,
                   labels=None) -> "OrbitalSet":
        orbs = []
        for j in range(stack.shape[0]):
            lab = labels[j] if labels else f"orbital_{j}"
            orbs.append(Field(grid, POSITION, stack[j], label=lab))
        return cls(tuple(orbs), time)


# ---------------------------------------------------------------------------
# interaction terms
# ---------------------------------------------------------------------------


def _convolve_hat(grid: Grid, pot_hat: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """(V * rho)(x) = (2 pi)^(n/2) F^-1(Vhat rhohat); rho given in position."""
    n = grid.dim
    scale_f = (2.0 * math.pi) ** (-n / 2.0) * grid.cell_volume
    rho_hat = np.fft.fftshift(_FFT(np.fft.ifftshift(rho))) * scale_f
    prod = pot_hat * rho_hat * (2.0 * math.pi) ** (n / 2.0)
    scale_b = (2.0 * math.pi) ** (-n / 2.0) * grid.dual_cell_volume * grid.npoints
    return np.fft.fftshift(_IFFT(np.fft.ifftshift(prod))) * scale_b


def convolve_potential(pot: Potential, rho_field: Field) -> Field:
    """V * rho for a real density; asserts the result is real."""
    rho = to_position(rho_field).values
    out = _convolve_hat(pot.grid, pot.hat, rho)
    scale = float(np.max(np.abs(out))) or 1.0
    if float(np.max(np.abs(out.imag))) > 1e-12 * scale:
        raise NumericalError("convolution of a real density produced an imaginary part")
    return Field(pot.grid, POSITION, out, label="convolution")


def _density_sums(stack: np.ndarray, skip_self: bool) -> np.ndarray:
    """rho_j = sum_{k != j} |u_k|^2 (or the total for every j when N == 1 rh)."""
    dens = np.stack([accel.abs2(stack[k]) for k in range(stack.shape[0])])
    total = dens.sum(axis=0)
    if skip_self:
        return total[None, ...] - dens
    return np.broadcast_to(total[None, ...], dens.shape).copy()


def _hartree_phases(grid, pot_hat, stack, model):
    """Real multipliers (V * rho_j) for every orbital, stacked."""
    if model == "rh":
        rho = accel.abs2(stack[0])
        conv = _convolve_hat(grid, pot_hat, rho).real
        return conv[None, ...]
    rhos = _density_sums(stack, skip_self=True)
    out = np.empty_like(rhos)
    for j in range(stack.shape[0]):
        out[j] = _convolve_hat(grid, pot_hat, rhos[j]).real
    return out


def hartree_term(state: OrbitalSet, pot: Potential, j: int) -> Field:
    """(V * sum_{k!=j} |u_k|^2) u_j; for rh the sum is |u|^2 itself."""
    if pot.grid != state.grid:
        raise ValueError("grid mismatch between state and potential")
    stack = state.stack_position()
    model = "rh" if len(state) == 1 else "hartree"
    phases = _hartree_phases(state.grid, pot.hat, stack, model)
    if len(state) == 1 and model == "rh" and j != 0:
        raise IndexError("rh state has a single orbital")
    vals = phases[j] * stack[j]
    return Field(state.grid, POSITION, vals, label=f"hartree_{j}")


def hartree_term_system(state: OrbitalSet, pot: Potential, j: int) -> Field:
    """Hartree-system convention even for N = 1 (empty sum -> zero field)."""
    if pot.grid != state.grid:
        raise ValueError("grid mismatch between state and potential")
    stack = state.stack_position()
    phases = _hartree_phases(state.grid, pot.hat, stack, "hartree")
    return Field(state.grid, POSITION, phases[j] * stack[j], label=f"hartree_{j}")


def fock_term(state: OrbitalSet, pot: Potential, j: int) -> Field:
    """Exchange term: -sum_{k!=j} u_k(x) (V * (conj(u_k) u_j))(x)."""
    if pot.grid != state.grid:
        raise ValueError("grid mismatch between state and potential")
    stack = state.stack_position()
    out = np.zeros_like(stack[0])
    for k in range(stack.shape[0]):
        if k == j:
            continue
        pair = np.conj(stack[k]) * stack[j]
        conv = _convolve_hat(state.grid, pot.hat, pair)
        out -= stack[k] * conv
    return Field(state.grid, POSITION, out, label=f"fock_{j}")


def apply_mean_field(grid, pot_hat, frozen, u, model):
    """One application of the frozen mean-field generator to orbitals u.

    frozen supplies the densities/exchange kernel; u is what the operator
    acts on.  Returns H u (stacked, position representation).
    """
    n_orb = frozen.shape[0]
    if model == "rh":
        rho = accel.abs2(frozen[0])
        conv = _convolve_hat(grid, pot_hat, rho).real
        return conv[None, ...] * u
    rhos = _density_sums(frozen, skip_self=True)
    out = np.empty_like(u)
    for j in range(n_orb):
        out[j] = _convolve_hat(grid, pot_hat, rhos[j]).real * u[j]
    if model == "hf":
        for j in range(n_orb):
            acc = np.zeros_like(u[0])
            for k in range(n_orb):
                if k == j:
                    continue
                pair = np.conj(frozen[k]) * u[j]
                acc += frozen[k] * _convolve_hat(grid, pot_hat, pair)
            out[j] -= acc
    return out


def nonlinear_generator(state: OrbitalSet, pot: Potential, model: str) -> list:
    """F(u) per orbital: hartree (plus exchange for hf), as Fields."""
    stack = state.stack_position()
    vals = apply_mean_field(state.grid, pot.hat, stack, stack, model)
    return [Field(state.grid, POSITION, vals[j], label=f"F_{j}") for j in range(len(state))]


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------


def _kinetic_apply(grid, stack, phase):
    """Multiply by exp(-i phase) in frequency space; stack is position rep."""
    out = np.empty_like(stack)
    mult = np.exp(-1j * phase)
    for j in range(stack.shape[0]):
        sh = np.fft.fftshift(_FFT(np.fft.ifftshift(stack[j])))
        out[j] = np.fft.fftshift(_IFFT(np.fft.ifftshift(sh * mult)))
    return out


def _nonlinear_step_phase(grid, pot_hat, stack, dt, model):
    """Exact phase rotation for rh/hartree (multiplier frozen by invariance)."""
    phases = _hartree_phases(grid, pot_hat, stack, model)
    out = np.empty_like(stack)
    for j in range(stack.shape[0]):
        out[j] = accel.phase_rotate(stack[j], dt * phases[j], sign=-1.0)
    return out


def _nonlinear_step_hf(grid, pot_hat, stack, dt, fp_tol, fp_min, fp_max):
    """Midpoint-frozen Cayley step for the hf nonlinearity.

    Two midpoint fixed-point passes determine the frozen Hermitian
    generator H; the update solves (1 + i dt/2 H) u+ = (1 - i dt/2 H) u
    by iteration, which is unitary per orbital up to the solve tolerance.
    """
    half = 0.5 * dt
    mid = stack
    for _ in range(2):
        hmid = apply_mean_field(grid, pot_hat, mid, mid, "hf")
        mid = stack - 1j * half * hmid
    frozen = mid

    rhs = stack - 1j * half * apply_mean_field(grid, pot_hat, frozen, stack, "hf")
    x = rhs.copy()
    norm_rhs = math.sqrt(accel.sum_abs2(rhs)) or 1.0
    for it in range(fp_max):
        x_new = rhs - 1j * half * apply_mean_field(grid, pot_hat, frozen, x, "hf")
        delta = math.sqrt(accel.sum_abs2(x_new - x))
        x = x_new
        if it + 1 >= fp_min and delta <= fp_tol * norm_rhs:
            break
    else:
        raise NumericalError("exchange sub-step fixed point did not converge")
    return x


@dataclass
class EvolutionMonitor:
    """Per-run tolerances and trajectory capture."""

    norm_tol: float = 1e-8
    wrap_tol: float = 1e-6
    safe_fraction: float = 0.5
    store_every: int = 0          # 0: store nothing
    check_every: int = 50
    times: list = dc_field(default_factory=list)
    snapshots: list = dc_field(default_factory=list)   # stacked position values


def evolve(state: OrbitalSet, pot: Potential, model: str, t_start: float,
           t_end: float, dt: float, monitor: EvolutionMonitor | None = None,
           fp_tol: float = 1e-13, fp_min_iters: int = 2,
           fp_max_iters: int = 40) -> OrbitalSet:
    """Integrate from t_start to t_end with Strang splitting.

    dt must divide the interval.  Norm drift beyond monitor.norm_tol, NaN,
    or mass escaping the safe box raise NumericalError.
    """
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}")
    if pot.grid != state.grid:
        raise ValueError("grid mismatch between state and potential")
    span = t_end - t_start
    if abs(span) < 1e-15:
        return state
    nsteps_f = span / dt
    nsteps = int(round(nsteps_f))
    if nsteps <= 0 or abs(nsteps_f - nsteps) > 1e-9:
        raise ConfigError(f"dt {dt} does not divide the interval {span}")
    step = span / nsteps

    grid = state.grid
    mon = monitor or EvolutionMonitor()
    stack = state.stack_position()
    init_norms = np.array([math.sqrt(grid.cell_volume * accel.sum_abs2(stack[j]))
                           for j in range(stack.shape[0])])
    half_phase = 0.5 * 0.5 * step * grid.radius2_freq()
    full_phase = 2.0 * half_phase

    ax = grid.axis_coords()
    lim = mon.safe_fraction * grid.half_extent
    outside = (ax < -lim) | (ax >= lim)
    mask = np.zeros(grid.shape, dtype=bool)
    for axis in range(grid.dim):
        shp = [1] * grid.dim
        shp[axis] = grid.points_per_axis
        mask |= outside.reshape(shp)

    def checks(vals, t_now):
        for j in range(vals.shape[0]):
            nrm2 = grid.cell_volume * accel.sum_abs2(vals[j])
            if not math.isfinite(nrm2):
                raise NumericalError(f"non-finite state at t = {t_now:.6g}")
            drift = abs(math.sqrt(nrm2) - init_norms[j]) / init_norms[j]
            if drift > mon.norm_tol:
                raise NumericalError(
                    f"orbital {j} norm drift {drift:.3e} exceeds {mon.norm_tol:.1e} "
                    f"at t = {t_now:.6g}"
                )
            wrapped = accel.masked_sum_abs2(vals[j], mask) * grid.cell_volume / nrm2
            if wrapped > mon.wrap_tol:
                raise NumericalError(
                    f"orbital {j}: {wrapped:.3e} of mass outside the safe box "
                    f"at t = {t_now:.6g}"
                )

    if mon.store_every:
        mon.times.append(t_start)
        mon.snapshots.append(stack.copy())

    pot_hat = pot.hat
    for k in range(nsteps):
        stack = _kinetic_apply(grid, stack, half_phase)
        if model == "hf" and stack.shape[0] > 1:
            stack = _nonlinear_step_hf(grid, pot_hat, stack, step,
                                       fp_tol, fp_min_iters, fp_max_iters)
        else:
            use = "rh" if model == "rh" else "hartree"
            stack = _nonlinear_step_phase(grid, pot_hat, stack, step, use)
        stack = _kinetic_apply(grid, stack, half_phase)
        t_now = t_start + (k + 1) * step
        if mon.store_every and (k + 1) % mon.store_every == 0:
            mon.times.append(t_now)
            mon.snapshots.append(stack.copy())
        if (k + 1) % mon.check_every == 0 or k + 1 == nsteps:
            checks(stack, t_now)

    labels = [o.label for o in state.orbitals]
    return OrbitalSet.from_stack(grid, stack, t_end, labels=labels)


# ---------------------------------------------------------------------------
# conserved functional
# ---------------------------------------------------------------------------


def energy(state: OrbitalSet, pot: Potential, model: str) -> float:
    """Conserved energy:  sum_j 1/2 ||grad u_j||^2
    + 1/2 sum_j <(V * rho_j), |u_j|^2>  (rho_j per model)
    - 1/4 * (exchange pairing, hf only).   All inner products discrete.
    """
    grid = state.grid
    stack = state.stack_position()
    r2 = grid.radius2_freq()
    kin = 0.0
    scale_f = (2.0 * math.pi) ** (-grid.dim / 2.0) * grid.cell_volume
    for j in range(stack.shape[0]):
        sh = np.fft.fftshift(_FFT(np.fft.ifftshift(stack[j]))) * scale_f
        kin += 0.5 * grid.dual_cell_volume * float(np.sum(r2 * accel.abs2(sh)))

    model_rho = "rh" if model == "rh" else "hartree"
    phases = _hartree_phases(grid, pot.hat, stack, model_rho)
    inter = 0.0
    for j in range(stack.shape[0]):
        inter += 0.5 * grid.cell_volume * float(
            np.sum(phases[j] * accel.abs2(stack[j]))
        )

    exch = 0.0
    if model == "hf":
        for j in range(stack.shape[0]):
            for k in range(stack.shape[0]):
                if k == j:
                    continue
                pair = np.conj(stack[k]) * stack[j]
                conv = _convolve_hat(grid, pot.hat, pair)
                exch += 0.5 * grid.cell_volume * float(
                    np.real(np.sum(np.conj(pair) * conv))
                )
    return kin + inter - 0.5 * exch


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: OrbitalSet, pot_spec: PotentialSpec, model: str,
                    dt: float, path_base: str):
    """OrbitalSet as concatenated field blobs plus a JSON manifest."""
    g = state.grid
    blobs = b"".join(
        np.ascontiguousarray(to_position(o).values, dtype="<c16").tobytes()
        for o in state.orbitals
    )
    with open(path_base + ".bin", "wb") as fh:
        fh.write(blobs)
    manifest = {
        "model": model,
        "t": state.time,
        "dt": dt,
        "n_orbitals": len(state),
        "grid": {"dim": g.dim, "M": g.points_per_axis, "L": g.half_extent},
        "potential": {
            "family": pot_spec.family,
            "amplitude": pot_spec.amplitude,
            "width": pot_spec.width,
            "exponent": pot_spec.exponent,
            "cutoff_radius": pot_spec.cutoff_radius,
            "taper_width": pot_spec.taper_width,
            "metadata": pot_spec.metadata,
        },
        "labels": [o.label for o in state.orbitals],
        "sha256": hashlib.sha256(blobs).hexdigest(),
    }
    with open(path_base + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path_base: str):
    with open(path_base + ".json") as fh:
        meta = json.load(fh)
    with open(path_base + ".bin", "rb") as fh:
        raw = fh.read()
    if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise ValueError(f"checksum mismatch for {path_base}.bin")
    from .grid import make_grid

    g = make_grid(meta["grid"]["dim"], meta["grid"]["M"], meta["grid"]["L"])
    count = meta["n_orbitals"]
    vals = np.frombuffer(raw, dtype="<c16").reshape((count,) + g.shape)
    orbs = tuple(
        Field(g, POSITION, vals[j], label=meta["labels"][j]) for j in range(count)
    )
    return OrbitalSet(orbs, meta["t"]), meta
