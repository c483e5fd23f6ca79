"""Weighted singular-system computation and regularized reconstruction.

The discretized first-kind operator maps node samples f(xi_j) with
quadrature weights w_j to lambda samples (K f)(lam_i) = sum_j K_ij w_j f_j
with lambda weights v_i.  The singular system is computed from the
symmetrically weighted matrix  A = diag(sqrt(v)) K diag(sqrt(w)),  so the
triples {mu_n, phi_n, g_n} satisfy

    K phi_n = mu_n g_n,     K^*(weighted) g_n = mu_n phi_n,

with phi_n orthonormal under the xi weights and g_n under the lambda
weights.  The reconstruction series  Vhat = sum (1/mu_n) <P, g_n> phi_n
is truncated (tsvd / discrepancy) or damped (tikhonov).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, NumericalError
from .kernels import KernelMatrix, RadialGrid


@dataclass
class SingularSystem:
    singular_values: np.ndarray      # non-increasing, >= 0
    right_vectors: np.ndarray        # [n_xi, n]  phi_n, columns
    left_vectors: np.ndarray         # [n_lambda, n]  g_n, columns
    xi_weights: np.ndarray
    lambda_weights: np.ndarray
    numerical_rank: int
    rank_tol: float

    def project_data(self, p: np.ndarray) -> np.ndarray:
        """coefficients c_n = <P, g_n> under the lambda weights."""
        return self.left_vectors.T @ (self.lambda_weights * p)


def lambda_quadrature_weights(lambda_grid: np.ndarray) -> np.ndarray:
    """Trapezoid weights on the lambda grid (uniform or not)."""
    lam = np.asarray(lambda_grid, dtype=float)
    if lam.size == 1:
        return np.array([1.0])
    w = np.zeros_like(lam)
    d = np.diff(lam)
    w[0] = d[0] / 2
    w[-1] = d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


def singular_system(kernel: KernelMatrix, rank_tol: float = 1e-10,
                    lambda_weights: np.ndarray | None = None) -> SingularSystem:
    """Weighted SVD of the kernel with a deterministic sign convention."""
    K = np.asarray(kernel.entries, dtype=float)
    if not np.all(np.isfinite(K)):
        raise NumericalError("kernel entries must be finite")
    wxi = kernel.xi_grid.weights
    wl = (lambda_weights if lambda_weights is not None
          else lambda_quadrature_weights(kernel.lambda_grid))
    if np.any(wl <= 0):
        raise ConfigError("lambda weights must be positive")
    sV = np.sqrt(wl)
    sW = np.sqrt(wxi)
    A = (sV[:, None] * K) * sW[None, :]
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        # retried with a tiny diagonal shift through the normal form
        try:
            U, s, Vt = np.linalg.svd(A + 1e-300, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD failed to converge: {exc}") from exc

    phi = Vt.T / sW[:, None]      # columns phi_n, orthonormal under wxi
    gvec = U / sV[:, None]        # columns g_n, orthonormal under wl

    # deterministic sign: first nonzero component of each phi_n positive
    for n in range(phi.shape[1]):
        col = phi[:, n]
        nz = np.nonzero(np.abs(col) > 1e-300)[0]
        if nz.size and col[nz[0]] < 0:
            phi[:, n] = -col
            gvec[:, n] = -gvec[:, n]

    mu1 = s[0] if s.size else 0.0
    if mu1 <= 0:
        rank = 0
    else:
        rank = int(np.sum(s / mu1 >= rank_tol))
    sys = SingularSystem(s, phi, gvec, wxi, wl, rank, rank_tol)
    _check_system(K, sys)
    return sys


def _check_system(K, sys: SingularSystem):
    """Defining relations and orthonormality, to 1e-10 * mu_1."""
    mu = sys.singular_values
    if mu.size == 0:
        return
    mu1 = mu[0] if mu[0] > 0 else 1.0
    r = min(sys.numerical_rank, mu.size)
    if r == 0:
        return
    phi, g = sys.right_vectors[:, :r], sys.left_vectors[:, :r]
    lhs = K @ (sys.xi_weights[:, None] * phi)
    res1 = np.max(np.abs(lhs - g * mu[:r][None, :]))
    lhs2 = K.T @ (sys.lambda_weights[:, None] * g)
    res2 = np.max(np.abs(lhs2 - phi * mu[:r][None, :]))
    gram_phi = phi.T @ (sys.xi_weights[:, None] * phi) - np.eye(r)
    gram_g = g.T @ (sys.lambda_weights[:, None] * g) - np.eye(r)
    worst = max(np.max(np.abs(gram_phi)), np.max(np.abs(gram_g)))
    if res1 > 1e-10 * mu1 or res2 > 1e-10 * mu1:
        raise NumericalError(
            f"singular-system residual too large ({res1:.2e}, {res2:.2e})"
        )
    if worst > 1e-10:
        raise NumericalError(f"orthonormality defect {worst:.2e} too large")


# ---------------------------------------------------------------------------
# Picard diagnostics
# ---------------------------------------------------------------------------


@dataclass
class PicardDiagnostic:
    coefficients: np.ndarray       # c_n = <P, g_n>
    ratios: np.ndarray             # c_n / mu_n
    divergence_flag: bool
    nullspace_component: float     # ||P - sum_{n<=rank} c_n g_n||_lambda
    partial_sums: np.ndarray


def picard_diagnostic(p: np.ndarray, sys: SingularSystem) -> PicardDiagnostic:
    """Square-summability proxy for the reconstruction series.

    The flag is set when the partial sums of |c_n/mu_n|^2 keep growing at
    the top of the usable spectrum: last-quartile growth more than 10x the
    mid-quartile growth (both measured over n <= numerical_rank).
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (sys.left_vectors.shape[0],):
        raise ConfigError("data vector does not match the lambda grid")
    c = sys.project_data(p)
    mu = sys.singular_values
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(mu > 0, c / np.where(mu > 0, mu, 1.0), np.inf)
    r = sys.numerical_rank
    sums = np.cumsum(ratios[:r] ** 2)
    flag = False
    if r >= 8:
        q = r // 4
        mid_growth = sums[2 * q - 1] - sums[q - 1]
        last_growth = sums[r - 1] - sums[3 * q - 1]
        flag = last_growth > 10.0 * max(mid_growth, 1e-300)
    recon = sys.left_vectors[:, :r] @ c[:r]
    nullspace = math.sqrt(float(np.sum(sys.lambda_weights * (p - recon) ** 2)))
    return PicardDiagnostic(c, ratios, bool(flag), nullspace, sums)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionResult:
    v_hat_estimate: np.ndarray
    truncation_index: int
    picard: PicardDiagnostic
    residual: float                # ||K Vhat - P||_lambda
    method: str
    param: float
    xi_grid: RadialGrid
    resolvable_mask: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "param": self.param,
            "truncation_index": self.truncation_index,
            "residual": self.residual,
            "picard_divergence_flag": self.picard.divergence_flag,
            "nullspace_component": self.picard.nullspace_component,
        }


def _residual(kernel: KernelMatrix, sys: SingularSystem, est, p) -> float:
    pred = kernel.entries @ (kernel.xi_grid.weights * est)
    return math.sqrt(float(np.sum(sys.lambda_weights * (pred - p) ** 2)))


def reconstruct(p: np.ndarray, sys: SingularSystem, kernel: KernelMatrix,
                method: str = "tsvd", param: float | None = None,
                noise_estimate: float | None = None) -> ReconstructionResult:
    """Regularized series solution of K Vhat = P.

    methods:
      tsvd:        param = truncation index k* (default numerical_rank)
      discrepancy: param = tau (default 1.1); needs noise_estimate; picks
                   the smallest k with residual <= tau * noise_estimate
      tikhonov:    param = alpha; coefficients mu c/(mu^2 + alpha^2)
    """
    p = np.asarray(p, dtype=float)
    diag = picard_diagnostic(p, sys)
    mu = sys.singular_values
    r = sys.numerical_rank
    if r == 0:
        raise NumericalError("empty usable spectrum: all singular values below rank_tol")
    c = diag.coefficients

    if method == "tsvd":
        k = int(param) if param is not None else r
        k = max(1, min(k, r))
        coeff = np.zeros_like(mu)
        coeff[:k] = c[:k] / mu[:k]
        est = sys.right_vectors @ coeff
        res = _residual(kernel, sys, est, p)
    elif method == "discrepancy":
        tau = float(param) if param is not None else 1.1
        if noise_estimate is None:
            raise ConfigError("discrepancy rule needs a noise estimate")
        target = tau * noise_estimate
        est = None
        k_used = r
        for k in range(1, r + 1):
            coeff = np.zeros_like(mu)
            coeff[:k] = c[:k] / mu[:k]
            trial = sys.right_vectors @ coeff
            res = _residual(kernel, sys, trial, p)
            est = trial
            k_used = k
            if res <= target:
                break
        k = k_used
    elif method == "tikhonov":
        if param is None:
            raise ConfigError("tikhonov needs alpha")
        alpha = float(param)
        coeff = mu * c / (mu**2 + alpha**2)
        coeff[r:] = 0.0
        est = sys.right_vectors @ coeff
        res = _residual(kernel, sys, est, p)
        k = r
    else:
        raise ConfigError(f"unknown reconstruction method {method!r}")

    # resolvable band: shells whose response energy the kept modes capture.
    # sigma_j^2 = sum_n (mu_n phi_n[j])^2 w_j is the full response of a unit
    # shell delta; the kept-mode fraction is in [0, 1] by completeness.
    k_eff = k if method != "tikhonov" else max(int(np.sum(mu[:r] >= alpha)), 1)
    k_eff = max(min(k_eff, r), 1)
    resp = (mu[None, :] * sys.right_vectors) ** 2 * sys.xi_weights[:, None]
    total = resp.sum(axis=1)
    kept = resp[:, :k_eff].sum(axis=1)
    alive = total > 1e-24 * max(float(total.max()), 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(alive, kept / np.where(alive, total, 1.0), 0.0)
    mask = frac >= 0.5
    return ReconstructionResult(est, k, diag, res, method,
                                float(param) if param is not None else float(k),
                                kernel.xi_grid, mask)


def range_component(v: np.ndarray, sys: SingularSystem, k: int | None = None) -> np.ndarray:
    """Projection of node samples onto span{phi_n : n <= k} (k default rank)."""
    k = sys.numerical_rank if k is None else min(k, sys.right_vectors.shape[1])
    phi = sys.right_vectors[:, :k]
    coef = phi.T @ (sys.xi_weights * v)
    return phi @ coef


def weighted_l2_error(est, truth, weights, mask=None) -> float:
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    w = np.asarray(weights, dtype=float)
    if mask is not None:
        if not np.any(mask):
            return float("nan")
        est, truth, w = est[mask], truth[mask], w[mask]
    denom = math.sqrt(float(np.sum(w * truth**2)))
    if denom == 0:
        return math.sqrt(float(np.sum(w * est**2)))
    return math.sqrt(float(np.sum(w * (est - truth) ** 2))) / denom


def add_noise(p: np.ndarray, level: float, seed: int) -> np.ndarray:
    """Additive noise, seeded, scaled to level * ||P||_inf."""
    rng = np.random.default_rng(seed)
    p = np.asarray(p, dtype=float)
    scale = level * float(np.max(np.abs(p)))
    return p + scale * rng.standard_normal(p.shape)


def noise_norm_estimate(p: np.ndarray, level: float,
                        lambda_weights: np.ndarray) -> float:
    """Expected weighted-L2 norm of the additive noise model."""
    scale = level * float(np.max(np.abs(p)))
    return scale * math.sqrt(float(np.sum(lambda_weights)))


# ---------------------------------------------------------------------------
# radial inverse transform
# ---------------------------------------------------------------------------


def fourier_to_potential(v_hat_samples, xi_grid: RadialGrid, radii) -> np.ndarray:
    """Radial profile V(r) from radial samples of the (real) transform.

    n = 1:  V(r) = sqrt(2/pi) int_0^inf Vhat(s) cos(r s) ds
    n = 2:  V(r) = int_0^inf Vhat(s) J0(r s) s ds
    n = 3:  V(r) = sqrt(2/pi) int_0^inf Vhat(s) sinc(r s) s^2 ds
    realized with the grid's shell weights (which include the angular
    measure), so the formulas below divide it back out per shell.
    """
    from scipy.special import j0

    v = np.asarray(v_hat_samples)
    if np.max(np.abs(np.imag(v))) > 1e-8 * max(float(np.max(np.abs(v))), 1e-300):
        raise ConfigError("fourier_to_potential expects a real transform")
    v = np.real(v).astype(float)
    r = np.atleast_1d(np.asarray(radii, dtype=float))
    s = xi_grid.nodes
    # radial measure per node: weights / angular factor
    if xi_grid.dim == 1:
        dmeas = xi_grid.weights / 2.0
        kern = np.cos(np.outer(r, s))
        pref = math.sqrt(2.0 / math.pi)
    elif xi_grid.dim == 2:
        dmeas = xi_grid.weights / (2.0 * math.pi * s)
        kern = j0(np.outer(r, s)) * s[None, :]
        pref = 1.0
    else:
        dmeas = xi_grid.weights / (4.0 * math.pi * s**2)
        rs = np.outer(r, s)
        kern = np.where(rs > 1e-300, np.sin(rs) / np.where(rs > 0, rs, 1.0), 1.0)
        kern = kern * (s**2)[None, :]
        pref = math.sqrt(2.0 / math.pi)
    return pref * (kern @ (v * dmeas))


def potential_to_fourier(v_samples, radii, xi_grid: RadialGrid,
                         position_weights) -> np.ndarray:
    """Forward radial transform (same kernels, for round trips)."""
    v = np.asarray(v_samples, dtype=float)
    r = np.asarray(radii, dtype=float)
    s = xi_grid.nodes
    pw = np.asarray(position_weights, dtype=float)
    if xi_grid.dim == 1:
        kern = np.cos(np.outer(s, r))
        pref = math.sqrt(2.0 / math.pi)
    elif xi_grid.dim == 2:
        from scipy.special import j0

        kern = j0(np.outer(s, r)) * r[None, :]
        pref = 1.0
    else:
        sr = np.outer(s, r)
        kern = np.where(sr > 1e-300, np.sin(sr) / np.where(sr > 0, sr, 1.0), 1.0)
        kern = kern * (r**2)[None, :]
        pref = math.sqrt(2.0 / math.pi)
    return pref * (kern @ (v * pw))
