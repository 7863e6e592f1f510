"""Dense row-major matrix primitives with a fixed reduction order.

Matrices are plain 2-D numpy arrays (float32 for storage; float64 is accepted
and preserved, which the finite-difference checks rely on). Every reduction
accumulates in float64 so results are reproducible call to call.
"""

import numpy as np

from . import kernels


def _as_matrix(m, name="matrix"):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.dtype not in (np.float32, np.float64):
        m = m.astype(np.float32)
    return np.ascontiguousarray(m)


def matmul(a, b):
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.dtype != a.dtype:
        b = b.astype(a.dtype)
    return kernels.matmul(a, b)


def softmax_rows(s, causal=False):
    """Row-wise softmax with max subtraction.

    With ``causal=True`` entry ``(i, j)`` for ``j > i`` is excluded from the
    row and set to exactly 0.
    """
    return kernels.softmax_rows(_as_matrix(s, "s"), bool(causal))


def silu(m):
    return kernels.silu(_as_matrix(m))


def hadamard(a, b):
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b.astype(a.dtype, copy=False)


def frobenius_norm(m):
    """Frobenius norm, accumulated in float64 and returned as float32."""
    return np.float32(kernels.frobenius_norm(_as_matrix(m)))


def rmsnorm_rows(m, gain, eps):
    m = _as_matrix(m)
    gain = np.ascontiguousarray(gain, dtype=m.dtype)
    if gain.shape != (m.shape[1],):
        raise ValueError(f"gain shape {gain.shape} does not match {m.shape[1]} columns")
    if not eps > 0:
        raise ValueError("eps must be positive")
    return kernels.rmsnorm_rows(m, gain, float(eps))
