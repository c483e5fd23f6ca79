"""First-kind integral kernels from time quadrature of free-flow spectra.

Builds the inverse-problem kernels

  G(xi, lam)      = int |F(|U0(t) phi_lam|^2)(xi)|^2 dt
  H_j(xi, lam)    = sum_{k != j} int F(|U0 phi_lam^k|^2) conj F(|U0 phi_lam^j|^2) dt
  HF_j(xi, lam)   = sum_k [direct_k] - sum_k int |F(U0 phi_lam^j conj U0 phi_lam^k)|^2 dt

on a radial frequency grid (origin excluded), and the forward map
``P(lam) = int Vhat(xi) K(xi, lam) dxi`` realized with the radial
quadrature weights.  Off-lattice radial nodes are evaluated by a
non-uniform DFT of the axis-1 marginal of the density, which is exact
for lattice densities.

Row evaluation recomputes each dilation analytically (the scaling
identity G(xi,lam) = (1+lam)^-(2n+2) G(xi/(1+lam), 0) is kept as a
validation property, not an assembly shortcut); the provenance records
the path used per row.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import accel
from .errors import ConfigError, GeometryError, NumericalError
from .grid import (
    FREQUENCY,
    POSITION,
    Field,
    Grid,
    ProbeSpec,
    dilate,
    fourier,
    inverse_fourier,
    make_band_limited_profile,
    to_frequency,
    to_position,
)


# ---------------------------------------------------------------------------
# pointwise spectra on the full lattice
# ---------------------------------------------------------------------------


def density_spectrum(phi: Field, t: float) -> Field:
    """F(|U0(t) phi|^2) on the full dual lattice."""
    from .propagator import free_propagate

    w = to_position(free_propagate(phi, t))
    rho = accel.abs2(w.values)
    return fourier(Field(phi.grid, POSITION, rho.astype(np.complex128),
                         label="density_spectrum"))


def pair_spectrum(phi_a: Field, phi_b: Field, t: float) -> Field:
    """F((U0(t) phi_a) conj(U0(t) phi_b)) on the full dual lattice."""
    if phi_a.grid != phi_b.grid:
        raise ValueError("pair_spectrum needs a common grid")
    from .propagator import free_propagate

    wa = to_position(free_propagate(phi_a, t))
    wb = to_position(free_propagate(phi_b, t))
    prod = wa.values * np.conj(wb.values)
    return fourier(Field(phi_a.grid, POSITION, prod, label="pair_spectrum"))


def density_spectrum_window(phi: Field, window: float, step: float = 0.02) -> np.ndarray:
    """int_{-W}^{W} |F(|U0 t phi|^2)(xi)|^2 dt on the full lattice (Simpson)."""
    grid = phi.grid
    nt = int(round(2 * window / step))
    if nt % 2 == 1:
        nt += 1
    ts = np.linspace(-window, window, nt + 1)
    w = np.ones(nt + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (ts[1] - ts[0]) / 3.0
    hat = to_frequency(phi).values
    r2 = grid.radius2_freq()
    n = grid.dim
    scale_b = (2.0 * math.pi) ** (-n / 2.0) * grid.dual_cell_volume * grid.npoints
    scale_f = (2.0 * math.pi) ** (-n / 2.0) * grid.cell_volume
    acc = np.zeros(grid.shape)
    for ti, wi in zip(ts, w):
        free = np.fft.fftshift(
            np.fft.ifftn(np.fft.ifftshift(hat * np.exp(-0.5j * ti * r2)))
        ) * scale_b
        rho = accel.abs2(free)
        rho_hat = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(rho))) * scale_f
        accel.accumulate_abs2(acc, rho_hat, wi)
    return acc


# ---------------------------------------------------------------------------
# radial frequency grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialGrid:
    """Radial quadrature nodes (origin excluded) with shell weights."""

    dim: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        weights = np.ascontiguousarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape:
            raise ConfigError("radial nodes/weights must be matching 1-D arrays")
        if np.any(nodes <= 0):
            raise ConfigError("radial nodes must exclude the origin (all > 0)")
        if np.any(np.diff(nodes) <= 0):
            raise ConfigError("radial nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ConfigError("radial weights must be positive")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.nodes.size


def _shell_area(dim: int, r: np.ndarray) -> np.ndarray:
    if dim == 1:
        return np.full_like(r, 2.0)          # the two rays
    if dim == 2:
        return 2.0 * math.pi * r
    return 4.0 * math.pi * r**2


def midpoint_shells(dim: int, xi_max: float, count: int) -> RadialGrid:
    """Midpoint shells on (0, xi_max]: nodes (i+1/2) d, weight area * d."""
    d = xi_max / count
    nodes = (np.arange(count) + 0.5) * d
    weights = _shell_area(dim, nodes) * d
    return RadialGrid(dim, nodes, weights)


def lattice_aligned_nodes(grid: Grid, count: int) -> RadialGrid:
    """Nodes at k*dxi, k=1..count (n=1 matches the lattice sum exactly)."""
    d = grid.dual_spacing
    nodes = d * np.arange(1, count + 1)
    weights = _shell_area(grid.dim, nodes) * d
    return RadialGrid(grid.dim, nodes, weights)


# ---------------------------------------------------------------------------
# time quadrature spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeQuad:
    """Symmetric Simpson quadrature, adaptively doubled until shell tails
    fall below tail_tol (relative); shells still unconverged at max_window
    are flagged (and dropped when drop_unconverged is set)."""

    window: float = 8.0
    step: float = 0.02
    tail_tol: float = 1e-8
    max_window: float = 64.0
    adaptive: bool = True
    drop_unconverged: bool = True

    def fixed(self) -> "TimeQuad":
        return TimeQuad(self.window, self.step, self.tail_tol,
                        self.window, False, False)


# ---------------------------------------------------------------------------
# kernel matrix
# ---------------------------------------------------------------------------


@dataclass
class KernelMatrix:
    kind: str                    # "G" | "H" | "HF"
    lambda_grid: np.ndarray
    xi_grid: RadialGrid
    entries: np.ndarray          # [n_lambda, n_xi] real
    sum_convention: str          # "k!=j" for H, "all k" for HF, "" for G
    provenance: dict = dc_field(default_factory=dict)
    dropped: np.ndarray | None = None   # boolean mask of dropped shells

    @property
    def grid_dim(self) -> int:
        return self.xi_grid.dim

    def lipschitz_constant(self) -> float:
        """max over adjacent rows of max_j |dK| / dlam."""
        lam = self.lambda_grid
        if lam.size < 2:
            return 0.0
        d = np.abs(np.diff(self.entries, axis=0)).max(axis=1)
        return float(np.max(d / np.diff(lam)))

    def save(self, path_base: str):
        raw = np.ascontiguousarray(self.entries, dtype="<f8").tobytes()
        with open(path_base + ".bin", "wb") as fh:
            fh.write(raw)
        header = {
            "kind": self.kind,
            "sum_convention": self.sum_convention,
            "lambda_grid": [float(x) for x in self.lambda_grid],
            "xi_nodes": [float(x) for x in self.xi_grid.nodes],
            "xi_weights": [float(x) for x in self.xi_grid.weights],
            "dim": self.xi_grid.dim,
            "shape": list(self.entries.shape),
            "provenance": self.provenance,
            "dropped": [bool(b) for b in self.dropped] if self.dropped is not None else None,
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        with open(path_base + ".json", "w") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path_base: str) -> "KernelMatrix":
        with open(path_base + ".json") as fh:
            header = json.load(fh)
        with open(path_base + ".bin", "rb") as fh:
            raw = fh.read()
        if hashlib.sha256(raw).hexdigest() != header["sha256"]:
            raise ValueError(f"checksum mismatch for {path_base}.bin")
        entries = np.frombuffer(raw, dtype="<f8").reshape(header["shape"]).copy()
        xi = RadialGrid(header["dim"], np.array(header["xi_nodes"]),
                        np.array(header["xi_weights"]))
        dropped = (np.array(header["dropped"], dtype=bool)
                   if header.get("dropped") is not None else None)
        return cls(header["kind"], np.array(header["lambda_grid"]), xi, entries,
                   header["sum_convention"], header.get("provenance", {}), dropped)


# ---------------------------------------------------------------------------
# radial evaluation machinery
# ---------------------------------------------------------------------------


class _RayEvaluator:
    """Evaluates lattice-function transforms at +/- radial nodes on axis 1.

    F(f)(r e1) = (2 pi)^(-n/2) h^n sum_x f(x) exp(-i r x1)
               = (2 pi)^(-n/2) h * sum_{x1} marginal(x1) exp(-i r x1)
    with marginal(x1) = h^(n-1) sum_{x_perp} f(x).
    """

    def __init__(self, grid: Grid, radii: np.ndarray):
        self.grid = grid
        self.radii = np.asarray(radii, dtype=float)
        x1 = grid.axis_coords()
        pref = (2.0 * math.pi) ** (-grid.dim / 2.0) * grid.spacing
        self.E = pref * np.exp(-1j * np.outer(self.radii, x1))

    def marginal(self, values: np.ndarray) -> np.ndarray:
        g = self.grid
        if g.dim == 1:
            return values
        return values.sum(axis=tuple(range(1, g.dim))) * g.spacing ** (g.dim - 1)

    def plus(self, values: np.ndarray) -> np.ndarray:
        return self.E @ self.marginal(values)

    def minus(self, values: np.ndarray) -> np.ndarray:
        return np.conj(self.E) @ self.marginal(values)


def _free_at(grid: Grid, hat: np.ndarray, t: float) -> np.ndarray:
    r2 = grid.radius2_freq()
    scale_b = (2.0 * math.pi) ** (-grid.dim / 2.0) * grid.dual_cell_volume * grid.npoints
    return np.fft.fftshift(
        np.fft.ifftn(np.fft.ifftshift(hat * np.exp(-0.5j * t * r2)))
    ) * scale_b


def _simpson_panel(a: float, b: float, step: float):
    """Simpson nodes/weights on [a, b] with an even subinterval count."""
    nt = max(2, int(round((b - a) / step)))
    if nt % 2 == 1:
        nt += 1
    ts = np.linspace(a, b, nt + 1)
    w = np.ones(nt + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (ts[1] - ts[0]) / 3.0
    return ts, w


def _integrate_rows(grid, hats, combine, radii, tq: TimeQuad):
    """Adaptive symmetric time integration of shell-valued integrands.

    hats: list of frequency-lattice arrays (the probes involved).
    combine: function(list of {"plus": vals, "minus": vals}) -> real shell row
             for a single time node.
    Returns (row, record) with the per-shell integral and quadrature record.
    """
    ray = _RayEvaluator(grid, radii)

    def panel(a, b):
        ts, w = _simpson_panel(a, b, tq.step)
        acc = np.zeros(len(radii))
        for ti, wi in zip(ts, w):
            evals = []
            for hat in hats:
                free = _free_at(grid, hat, ti)
                evals.append(free)
            acc += wi * combine(evals, ray)
        return acc

    W = tq.window
    total = panel(-W, W)
    record = {"window": W, "step": tq.step, "tail": None, "extensions": 0}
    if not tq.adaptive:
        return total, np.zeros(len(radii), dtype=bool), record

    unconv = np.ones(len(radii), dtype=bool)
    while True:
        ext = panel(W, 2 * W) + panel(-2 * W, -W)
        scale = np.maximum(np.abs(total), 1e-300)
        tail = np.abs(ext) / scale
        total = total + ext
        W *= 2
        record["extensions"] += 1
        record["window"] = W
        unconv = tail > tq.tail_tol
        record["tail"] = float(np.max(tail))
        if not np.any(unconv):
            break
        if 2 * W > tq.max_window:
            break
    return total, unconv, record


def _combine_g(evals, ray):
    rho = accel.abs2(evals[0])
    g1 = ray.plus(rho)
    return accel.abs2(g1)


def _dilated_hat(base, lam: float, grid: Grid) -> np.ndarray:
    """Frequency values of the dilated probe (analytic for ProbeSpec)."""
    if isinstance(base, ProbeSpec):
        spec = ProbeSpec(base.center_freq, base.band_radius, base.smoothness_order,
                         base.amplitude, base.velocity, float(lam))
        return make_band_limited_profile(grid, spec).values
    if isinstance(base, Field):
        if lam == 0.0:
            return to_frequency(base).values
        return to_frequency(dilate(base, lam)).values
    raise TypeError("probe must be a ProbeSpec or a Field")


def _probe_hash(base) -> str:
    if isinstance(base, ProbeSpec):
        blob = json.dumps({
            "p": base.center_freq, "eps": base.band_radius,
            "m": base.smoothness_order, "amp": base.amplitude,
        }, sort_keys=True).encode()
    else:
        blob = np.ascontiguousarray(to_frequency(base).values).tobytes()
    return hashlib.sha256(blob).hexdigest()[:16]


def kernel_G(probe, lambda_grid, xi_grid: RadialGrid, time_quad: TimeQuad,
             grid: Grid | None = None) -> KernelMatrix:
    """Assemble G(xi_j, lam_i) by time quadrature; rows recomputed per lam."""
    if isinstance(probe, Field):
        grid = probe.grid
    elif grid is None:
        raise ConfigError("kernel_G needs an explicit grid for a ProbeSpec probe")
    lam = np.asarray(lambda_grid, dtype=float)
    entries = np.zeros((lam.size, len(xi_grid)))
    dropped = np.zeros(len(xi_grid), dtype=bool)
    records = []
    for i, lv in enumerate(lam):
        hat = _dilated_hat(probe, float(lv), grid)
        row, unconv, rec = _integrate_rows(grid, [hat], _combine_g,
                                           xi_grid.nodes, time_quad)
        rec["path"] = "recomputed"
        records.append(rec)
        dropped |= unconv
        entries[i] = row
    if np.any(dropped):
        if time_quad.drop_unconverged:
            entries[:, dropped] = 0.0
        else:
            raise NumericalError(
                f"time quadrature unconverged on {int(dropped.sum())} shells "
                f"(smallest |xi| = {xi_grid.nodes[dropped][0]:.4g})"
            )
    if np.any(entries[:, ~dropped] < -1e-12 * max(entries.max(), 1e-300)):
        raise NumericalError("G entries must be non-negative")
    entries = np.clip(entries, 0.0, None)
    prov = {"probe": _probe_hash(probe), "rows": records}
    return KernelMatrix("G", lam, xi_grid, entries, "", prov,
                        dropped if np.any(dropped) else None)


def kernel_H(orbital_probes, j: int, lambda_grid, xi_grid: RadialGrid,
             time_quad: TimeQuad, grid: Grid | None = None) -> KernelMatrix:
    """H_j(xi, lam) = sum_{k != j} int G1_k conj(G1_j) dt (entries realified
    by the +/- ray average; imaginary residue asserted small)."""
    probes = list(orbital_probes)
    if grid is None:
        fields = [p for p in probes if isinstance(p, Field)]
        if not fields:
            raise ConfigError("kernel_H needs a grid when all probes are specs")
        grid = fields[0].grid
    if not (0 <= j < len(probes)):
        raise IndexError("orbital index out of range")
    lam = np.asarray(lambda_grid, dtype=float)
    entries = np.zeros((lam.size, len(xi_grid)))
    dropped = np.zeros(len(xi_grid), dtype=bool)
    records = []
    imag_worst = [0.0]

    def combine(evals, ray):
        rho_j = accel.abs2(evals[0])
        gj = ray.plus(rho_j)
        gj_m = ray.minus(rho_j)
        acc = np.zeros(len(xi_grid), dtype=complex)
        for w in evals[1:]:
            rho_k = accel.abs2(w)
            gk = ray.plus(rho_k)
            gk_m = ray.minus(rho_k)
            acc += 0.5 * (gk * np.conj(gj) + gk_m * np.conj(gj_m))
        imag_worst[0] = max(imag_worst[0], float(np.max(np.abs(acc.imag), initial=0.0)))
        return acc.real

    for i, lv in enumerate(lam):
        hats = [_dilated_hat(probes[j], float(lv), grid)]
        hats += [_dilated_hat(p, float(lv), grid)
                 for k, p in enumerate(probes) if k != j]
        if len(hats) == 1:
            records.append({"path": "empty-sum"})
            continue
        row, unconv, rec = _integrate_rows(grid, hats, combine,
                                           xi_grid.nodes, time_quad)
        rec["path"] = "recomputed"
        records.append(rec)
        dropped |= unconv
        entries[i] = row
    if np.any(dropped) and time_quad.drop_unconverged:
        entries[:, dropped] = 0.0
    scale = float(np.max(np.abs(entries), initial=0.0))
    if imag_worst[0] > 1e-10 * max(scale, 1e-300):
        raise NumericalError(
            f"H kernel imaginary residue {imag_worst[0]:.3e} exceeds tolerance"
        )
    prov = {"probes": [_probe_hash(p) for p in probes], "j": j, "rows": records}
    return KernelMatrix("H", lam, xi_grid, entries, "k!=j", prov,
                        dropped if np.any(dropped) else None)


def kernel_HF(orbital_probes, j: int, lambda_grid, xi_grid: RadialGrid,
              time_quad: TimeQuad, grid: Grid | None = None) -> KernelMatrix:
    """HF_j = sum_k [direct_k] - sum_k [exchange_k]; the k = j summand
    cancels exactly (|F(|u|^2)|^2 == |F(u conj u)|^2)."""
    probes = list(orbital_probes)
    if grid is None:
        fields = [p for p in probes if isinstance(p, Field)]
        if not fields:
            raise ConfigError("kernel_HF needs a grid when all probes are specs")
        grid = fields[0].grid
    if not (0 <= j < len(probes)):
        raise IndexError("orbital index out of range")
    lam = np.asarray(lambda_grid, dtype=float)
    entries = np.zeros((lam.size, len(xi_grid)))
    dropped = np.zeros(len(xi_grid), dtype=bool)
    records = []
    imag_worst = [0.0]

    def combine(evals, ray):
        wj = evals[0]
        rho_j = accel.abs2(wj)
        gj = ray.plus(rho_j)
        gj_m = ray.minus(rho_j)
        acc = np.zeros(len(xi_grid), dtype=complex)
        for wk in evals:
            rho_k = accel.abs2(wk)
            gk = ray.plus(rho_k)
            gk_m = ray.minus(rho_k)
            direct = 0.5 * (gk * np.conj(gj) + gk_m * np.conj(gj_m))
            pair = wj * np.conj(wk)
            g2p = ray.plus(pair)
            g2m = ray.minus(pair)
            exch = 0.5 * (accel.abs2(g2p) + accel.abs2(g2m))
            acc += direct - exch
        imag_worst[0] = max(imag_worst[0], float(np.max(np.abs(acc.imag), initial=0.0)))
        return acc.real

    for i, lv in enumerate(lam):
        hats = [_dilated_hat(probes[j], float(lv), grid)]
        hats += [_dilated_hat(p, float(lv), grid)
                 for k, p in enumerate(probes) if k != j]
        # evals[0] doubles as the j-orbital and its own k = j summand
        row, unconv, rec = _integrate_rows(grid, hats, combine,
                                           xi_grid.nodes, time_quad)
        rec["path"] = "recomputed"
        records.append(rec)
        dropped |= unconv
        entries[i] = row
    if np.any(dropped) and time_quad.drop_unconverged:
        entries[:, dropped] = 0.0
    scale = float(np.max(np.abs(entries), initial=0.0))
    if imag_worst[0] > 1e-10 * max(scale, 1e-300):
        raise NumericalError(
            f"HF kernel imaginary residue {imag_worst[0]:.3e} exceeds tolerance"
        )
    prov = {"probes": [_probe_hash(p) for p in probes], "j": j, "rows": records}
    return KernelMatrix("HF", lam, xi_grid, entries, "all k", prov,
                        dropped if np.any(dropped) else None)


def hf_diagonal_cancellation(probe, grid: Grid, t_samples, xi_grid: RadialGrid) -> float:
    """Max |direct_jj - exchange_jj| per node: the k = j summand is zero."""
    hat = _dilated_hat(probe, 0.0, grid)
    ray = _RayEvaluator(grid, xi_grid.nodes)
    worst = 0.0
    for t in t_samples:
        w = _free_at(grid, hat, t)
        rho = accel.abs2(w)
        g1 = ray.plus(rho)
        pair = w * np.conj(w)
        g2 = ray.plus(pair)
        worst = max(worst, float(np.max(np.abs(accel.abs2(g1) - accel.abs2(g2)))))
    return worst


def forward_map(v_hat_samples, kernel: KernelMatrix) -> np.ndarray:
    """P(lam_i) = sum_j K[i, j] * Vhat(xi_j) * w_j (literal kernel integral)."""
    v = np.asarray(v_hat_samples, dtype=float)
    if v.shape != kernel.xi_grid.nodes.shape:
        raise ConfigError(
            f"Vhat samples shape {v.shape} != xi grid {kernel.xi_grid.nodes.shape}"
        )
    return kernel.entries @ (v * kernel.xi_grid.weights)


def kernel_row_at(probe, grid: Grid, lam: float, radii, time_quad: TimeQuad):
    """G(r, lam) at arbitrary radial nodes (validation helper)."""
    hat = _dilated_hat(probe, float(lam), grid)
    row, unconv, rec = _integrate_rows(grid, [hat], _combine_g,
                                       np.asarray(radii, dtype=float), time_quad)
    return row, unconv, rec


def spectrum_l2_proxy(phi: Field, window: float, step: float = 0.05) -> float:
    """int int |F(|U0 t phi|^2)|^2 dxi dt over the window (boundedness proxy)."""
    G = density_spectrum_window(phi, window, step)
    return float(phi.grid.dual_cell_volume * np.sum(G))


def h1_norm_discrete(phi: Field) -> float:
    """(||phi||^2 + ||grad phi||^2)^(1/2) via the dual lattice."""
    hat = to_frequency(phi)
    r2 = phi.grid.radius2_freq()
    m2 = accel.abs2(hat.values)
    val = phi.grid.dual_cell_volume * float(np.sum((1.0 + r2) * m2))
    return math.sqrt(val)
