"""Numeric primitives shared by every module.

Tensors are plain ``numpy.ndarray`` values (row-major, float64 on verification
paths, float32 allowed in training loops).  Randomness comes exclusively from
:func:`make_rng`, which wraps numpy's PCG64 bit generator (PCG-XSL-RR 128/64,
O'Neill 2014).  PCG64 output for a given seed is fixed across platforms and
numpy releases; ``tests/test_numerics.py`` pins raw test vectors.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-5


class OracleError(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator for a non-negative 64-bit seed."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def logsumexp(values, axis=None):
    """Max-shifted ``log(sum(exp(values)))``.

    With ``axis=None`` the input must be a non-empty vector and a float is
    returned; otherwise the reduction runs along ``axis``.
    """
    v = np.asarray(values)
    if v.dtype.kind != "f":
        v = v.astype(np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    if axis is None:
        m = v.max()
        return float(m + np.log(np.exp(v - m).sum()))
    m = v.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` in float64."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        # divide by the step actually represented, not the nominal 2h
        xp, xm = orig + h, orig - h
        flat[i] = xp
        fp = float(f(x))
        flat[i] = xm
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError("oracle evaluation failed")
        gflat[i] = (fp - fm) / (xp - xm)
    return grad


def rel_error(a, b) -> float:
    """Worst elementwise ``|a - b| / max(1, |a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
