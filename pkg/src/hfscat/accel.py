"""Hot inner-loop kernels: numba-compiled with a pure-numpy fallback.

The numba path is used when the package can import numba and the
environment variable ``HFSCAT_DISABLE_NUMBA`` is unset/``0``.  Set
``HFSCAT_DISABLE_NUMBA=1`` before importing :mod:`hfscat` to force the
numpy fallback.  Both paths compute the same quantities; the compiled
kernels fuse loops the fallback writes with temporaries.

``benchmarks/bench_accel.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("HFSCAT_DISABLE_NUMBA", "0").strip().lower()
NUMBA_DISABLED = _flag not in ("", "0", "false", "no")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled via HFSCAT_DISABLE_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    _njit = None


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _phase_rotate_np(values, phase, sign):
    """values * exp(1j * sign * phase), elementwise (phase real)."""
    return values * np.exp(1j * sign * phase)


def _abs2_np(values):
    return values.real * values.real + values.imag * values.imag


def _accumulate_abs2_np(acc, values, weight):
    acc += weight * (values.real * values.real + values.imag * values.imag)
    return acc


def _dot_conj_np(a, b):
    """sum_i a[i] * conj(b[i])  (no volume element)."""
    return complex(np.vdot(b, a))


def _sum_abs2_np(values):
    return float(np.vdot(values, values).real)


def _masked_sum_abs2_np(values, mask):
    v = values[mask]
    return float(np.vdot(v, v).real)


# ---------------------------------------------------------------------------
# numba kernels (flat 1-D views; callers ravel nd arrays)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @_njit(cache=True)
    def _phase_rotate_nb(values, phase, sign):
        out = np.empty_like(values)
        for i in range(values.size):
            c = np.cos(phase[i])
            s = np.sin(phase[i]) * sign
            re = values[i].real
            im = values[i].imag
            out[i] = complex(re * c - im * s, re * s + im * c)
        return out

    @_njit(cache=True)
    def _abs2_nb(values):
        out = np.empty(values.size, dtype=np.float64)
        for i in range(values.size):
            out[i] = values[i].real * values[i].real + values[i].imag * values[i].imag
        return out

    @_njit(cache=True)
    def _accumulate_abs2_nb(acc, values, weight):
        for i in range(values.size):
            acc[i] += weight * (
                values[i].real * values[i].real + values[i].imag * values[i].imag
            )
        return acc

    @_njit(cache=True)
    def _dot_conj_nb(a, b):
        sr = 0.0
        si = 0.0
        for i in range(a.size):
            sr += a[i].real * b[i].real + a[i].imag * b[i].imag
            si += a[i].imag * b[i].real - a[i].real * b[i].imag
        return complex(sr, si)

    @_njit(cache=True)
    def _sum_abs2_nb(values):
        s = 0.0
        for i in range(values.size):
            s += values[i].real * values[i].real + values[i].imag * values[i].imag
        return s

    @_njit(cache=True)
    def _masked_sum_abs2_nb(values, mask):
        s = 0.0
        for i in range(values.size):
            if mask[i]:
                s += values[i].real * values[i].real + values[i].imag * values[i].imag
        return s


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def phase_rotate(values, phase, sign=-1.0):
    """Return values * exp(1j*sign*phase); shapes must match."""
    flat = np.ascontiguousarray(values).ravel()
    ph = np.ascontiguousarray(phase, dtype=np.float64).ravel()
    if HAVE_NUMBA:
        out = _phase_rotate_nb(flat, ph, float(sign))
    else:
        out = _phase_rotate_np(flat, ph, float(sign))
    return out.reshape(values.shape)


def abs2(values):
    """|values|^2 as float64, same shape."""
    flat = np.ascontiguousarray(values).ravel()
    out = _abs2_nb(flat) if HAVE_NUMBA else _abs2_np(flat)
    return out.reshape(values.shape)


def accumulate_abs2(acc, values, weight=1.0):
    """acc += weight * |values|^2 in place; acc is float64."""
    flat_acc = acc.ravel()
    flat = np.ascontiguousarray(values).ravel()
    if HAVE_NUMBA:
        _accumulate_abs2_nb(flat_acc, flat, float(weight))
    else:
        _accumulate_abs2_np(flat_acc, flat, float(weight))
    return acc


def dot_conj(a, b):
    """sum a*conj(b) over all entries (conjugation on the second argument)."""
    fa = np.ascontiguousarray(a).ravel()
    fb = np.ascontiguousarray(b).ravel()
    if HAVE_NUMBA:
        return _dot_conj_nb(fa, fb)
    return _dot_conj_np(fa, fb)


def sum_abs2(values):
    flat = np.ascontiguousarray(values).ravel()
    if HAVE_NUMBA:
        return _sum_abs2_nb(flat)
    return _sum_abs2_np(flat)


def masked_sum_abs2(values, mask):
    flat = np.ascontiguousarray(values).ravel()
    fm = np.ascontiguousarray(mask).ravel()
    if HAVE_NUMBA:
        return _masked_sum_abs2_nb(flat, fm)
    return _masked_sum_abs2_np(flat, fm)


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"
