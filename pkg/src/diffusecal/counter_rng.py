"""Counter-based random sampling for reproducible photon noise.

Every random number is a pure function of an explicit key tuple
(seed, stream, element id, trial, slot) hashed through splitmix64. There
is no generator state, so results are bit-identical no matter how work is
split across threads or in what order elements are evaluated.

Poisson sampling uses Knuth's product method for small means and
Hormann's PTRS transformed rejection for lam >= 10; both consume uniforms
addressed by a per-element trial counter, which keeps the variable-length
rejection loops order-independent.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = 0xFFFFFFFFFFFFFFFF

# lam at or above this uses PTRS; below it, Knuth's product method.
_PTRS_MIN_LAM = 10.0

_lgamma = np.frompyfunc(math.lgamma, 1, 1)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # Arrays of ndim >= 1 wrap silently on overflow; 0-d would take numpy's
    # warning-emitting scalar path, so callers keep inputs at least 1-d.
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _as_u64(value) -> np.ndarray:
    # Keys may be negative or arbitrarily wide Python ints; wrap to 64 bits.
    # 0-d arrays (not numpy scalars) keep integer overflow silent downstream.
    if isinstance(value, (int, np.integer)):
        return np.asarray(np.uint64(int(value) & _MASK64))
    arr = np.asarray(value)
    if arr.dtype.kind == "i":
        return arr.astype(np.int64).view(np.uint64)
    if arr.dtype.kind == "u":
        return arr.astype(np.uint64)
    raise TypeError(f"cannot key the counter RNG with dtype {arr.dtype}")


def hash_u64(*words) -> np.ndarray:
    """Fold any number of broadcastable integer words into one uint64."""
    shape = np.broadcast_shapes(*(np.shape(w) for w in words)) if words else ()
    state = _splitmix64(np.atleast_1d(np.asarray(_GOLDEN)))
    for w in words:
        state = _splitmix64(state ^ np.atleast_1d(_as_u64(w)))
    return state.reshape(shape)


def uniform_from_keys(*words) -> np.ndarray:
    """Uniform draw in the open interval (0, 1) keyed by the given words."""
    bits = hash_u64(*words)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0**-53)


def _poisson_knuth(lam: np.ndarray, seed: int, stream: int, element: np.ndarray) -> np.ndarray:
    out = np.zeros(lam.shape, dtype=np.int64)
    active = lam > 0.0
    limit = np.exp(-lam)
    prod = np.ones_like(lam)
    trial = 0
    while active.any():
        trial += 1
        if trial > 1000:
            raise RuntimeError("poisson sampler failed to terminate")
        u = uniform_from_keys(seed, stream, element[active], trial, 0)
        prod[active] *= u
        finished = active & (prod <= limit)
        out[finished] = trial - 1
        active &= ~finished
    return out


def _poisson_ptrs(lam: np.ndarray, seed: int, stream: int, element: np.ndarray) -> np.ndarray:
    """Hormann's PTRS transformed rejection, vectorized over elements."""
    out = np.zeros(lam.shape, dtype=np.int64)
    b = 0.931 + 2.53 * np.sqrt(lam)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    log_lam = np.log(lam)

    active = np.ones(lam.shape, dtype=bool)
    trial = 0
    while active.any():
        trial += 1
        if trial > 1000:
            raise RuntimeError("poisson sampler failed to terminate")
        idx = np.nonzero(active)[0]
        u = uniform_from_keys(seed, stream, element[idx], trial, 0) - 0.5
        v = uniform_from_keys(seed, stream, element[idx], trial, 1)
        us = 0.5 - np.abs(u)
        k = np.floor((2.0 * a[idx] / us + b[idx]) * u + lam[idx] + 0.43)

        # Fast acceptance region first; it takes precedence over rejection.
        accept = (us >= 0.07) & (v <= v_r[idx])
        reject = ~accept & ((k < 0) | ((us < 0.013) & (v > us)))
        rest = ~(accept | reject)
        if rest.any():
            ri = idx[rest]
            lhs = np.log(v[rest] * inv_alpha[ri] / (a[ri] / (us[rest] * us[rest]) + b[ri]))
            rhs = -lam[ri] + k[rest] * log_lam[ri] - _lgamma(k[rest] + 1.0).astype(np.float64)
            accept[rest] = lhs <= rhs
        done = idx[accept]
        out[done] = k[accept].astype(np.int64)
        active[done] = False
    return out


def poisson_from_keys(lam, seed: int, stream: int, element) -> np.ndarray:
    """Poisson draws keyed by (seed, stream, element).

    lam and element must have matching shapes; each element's draw depends
    only on its own key tuple, never on evaluation order or on the other
    elements present in the call.
    """
    lam_arr = np.asarray(lam, dtype=np.float64).ravel()
    elem_arr = np.asarray(element, dtype=np.int64).ravel()
    if lam_arr.shape != elem_arr.shape:
        raise ValueError(f"lam shape {lam_arr.shape} != element shape {elem_arr.shape}")
    if np.any(lam_arr < 0):
        raise ValueError("negative Poisson mean")
    out = np.zeros(lam_arr.shape, dtype=np.int64)
    small = (lam_arr > 0.0) & (lam_arr < _PTRS_MIN_LAM)
    large = lam_arr >= _PTRS_MIN_LAM
    if small.any():
        out[small] = _poisson_knuth(lam_arr[small], seed, stream, elem_arr[small])
    if large.any():
        out[large] = _poisson_ptrs(lam_arr[large], seed, stream, elem_arr[large])
    return out.reshape(np.shape(lam))
