"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The public names at the bottom of this module are bound to one flavour at
import time (see ``_backend``). Both flavours are importable directly as
``<name>_numba`` / ``<name>_numpy`` so tests and benchmarks can compare them.

All reductions accumulate in float64 in a fixed order. Outputs keep the
input dtype except where a float64 result is documented.
"""

import numpy as np

from ._backend import USE_NUMBA, njit, prange

# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------


@njit
def matmul_numba(a, b):
    n, inner = a.shape
    m = b.shape[1]
    out = np.empty((n, m), dtype=a.dtype)
    acc = np.empty(m, dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc[j] = 0.0
        for k in range(inner):
            aik = np.float64(a[i, k])
            for j in range(m):
                acc[j] += aik * np.float64(b[k, j])
        for j in range(m):
            out[i, j] = acc[j]
    return out


@njit
def _softmax64(s, causal):
    n, m = s.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        width = min(i + 1, m) if causal else m
        mx = -np.inf
        for j in range(width):
            if s[i, j] > mx:
                mx = s[i, j]
        den = 0.0
        for j in range(width):
            e = np.exp(np.float64(s[i, j]) - mx)
            out[i, j] = e
            den += e
        for j in range(width):
            out[i, j] /= den
    return out


@njit
def softmax_rows_numba(s, causal):
    return _softmax64(s, causal).astype(s.dtype)


@njit
def silu_numba(m):
    out = np.empty_like(m)
    flat_in = m.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        x = np.float64(flat_in[i])
        flat_out[i] = x / (1.0 + np.exp(-x))
    return out


@njit
def rmsnorm_rows_numba(m, gain, eps):
    n, d = m.shape
    out = np.empty_like(m)
    for i in range(n):
        ss = 0.0
        for j in range(d):
            x = np.float64(m[i, j])
            ss += x * x
        inv = 1.0 / np.sqrt(ss / d + eps)
        for j in range(d):
            out[i, j] = np.float64(m[i, j]) * inv * np.float64(gain[j])
    return out


@njit
def frobenius_norm_numba(m):
    flat = m.ravel()
    ss = 0.0
    for i in range(flat.size):
        x = np.float64(flat[i])
        ss += x * x
    return np.sqrt(ss)


@njit
def ffn_impacts_numba(h_act, w_down):
    l, d_inter = h_act.shape
    d_model = w_down.shape[1]
    out = np.empty(d_inter, dtype=np.float64)
    for k in range(d_inter):
        hs = 0.0
        for i in range(l):
            x = np.float64(h_act[i, k])
            hs += x * x
        ws = 0.0
        for j in range(d_model):
            x = np.float64(w_down[k, j])
            ws += x * x
        out[k] = np.sqrt(hs) * np.sqrt(ws)
    return out


@njit
def attn_v_impacts_numba(a, v):
    l = a.shape[0]
    d = v.shape[1]
    out = np.empty(d, dtype=np.float64)
    for k in range(d):
        ss = 0.0
        for i in range(l):
            acc = 0.0
            for t in range(l):
                acc += np.float64(a[i, t]) * np.float64(v[t, k])
            ss += acc * acc
        out[k] = np.sqrt(ss)
    return out


@njit(parallel=True)
def attn_qk_impacts_numba(q, k, v, scale, causal):
    l, d = q.shape
    dv = v.shape[1]
    s = np.empty((l, l), dtype=np.float64)
    for i in range(l):
        for j in range(l):
            acc = 0.0
            for c in range(d):
                acc += np.float64(q[i, c]) * np.float64(k[j, c])
            s[i, j] = acc * scale
    a = _softmax64(s, causal)
    out = np.empty(d, dtype=np.float64)
    for c in prange(d):
        adj = np.empty((l, l), dtype=np.float64)
        for i in range(l):
            qi = np.float64(q[i, c]) * scale
            for j in range(l):
                adj[i, j] = s[i, j] - qi * np.float64(k[j, c])
        ak = _softmax64(adj, causal)
        ss = 0.0
        for i in range(l):
            for j in range(dv):
                acc = 0.0
                for t in range(l):
                    acc += (a[i, t] - ak[i, t]) * np.float64(v[t, j])
                ss += acc * acc
        out[c] = np.sqrt(ss)
    return out


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------


def matmul_numpy(a, b):
    # Rank-1 updates in ascending k give the same per-entry summation order
    # as the scalar triple loop.
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    for k in range(a.shape[1]):
        acc += a64[:, k, None] * b64[None, k, :]
    return acc.astype(a.dtype)


def _causal_fill(s, causal):
    if not causal:
        return s
    n, m = s.shape[-2:]
    future = np.triu(np.ones((n, m), dtype=bool), k=1)
    return np.where(future, -np.inf, s)


def _softmax64_numpy(s, causal):
    s = _causal_fill(np.asarray(s, dtype=np.float64), causal)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_numpy(s, causal):
    return _softmax64_numpy(s, causal).astype(s.dtype)


def silu_numpy(m):
    x = m.astype(np.float64)
    with np.errstate(over="ignore"):
        return (x / (1.0 + np.exp(-x))).astype(m.dtype)


def rmsnorm_rows_numpy(m, gain, eps):
    x = m.astype(np.float64)
    inv = 1.0 / np.sqrt((x * x).sum(axis=1) / m.shape[1] + eps)
    return (x * inv[:, None] * gain.astype(np.float64)).astype(m.dtype)


def frobenius_norm_numpy(m):
    x = np.asarray(m, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(x, x)))


def ffn_impacts_numpy(h_act, w_down):
    h = h_act.astype(np.float64)
    w = w_down.astype(np.float64)
    return np.sqrt((h * h).sum(axis=0)) * np.sqrt((w * w).sum(axis=1))


def attn_v_impacts_numpy(a, v):
    av = a.astype(np.float64) @ v.astype(np.float64)
    return np.sqrt((av * av).sum(axis=0))


def attn_qk_impacts_numpy(q, k, v, scale, causal):
    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)
    s = (q64 @ k64.T) * scale
    a = _softmax64_numpy(s, causal)
    # One l x l score correction per column: delta[c] = outer(q[:, c], k[:, c]).
    delta = (q64.T * scale)[:, :, None] * k64.T[:, None, :]
    ak = _softmax64_numpy(s[None, :, :] - delta, causal)
    change = (a[None, :, :] - ak) @ v.astype(np.float64)
    return np.sqrt((change * change).sum(axis=(1, 2)))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    matmul = matmul_numba
    softmax_rows = softmax_rows_numba
    silu = silu_numba
    rmsnorm_rows = rmsnorm_rows_numba
    frobenius_norm = frobenius_norm_numba
    ffn_impacts = ffn_impacts_numba
    attn_v_impacts = attn_v_impacts_numba
    attn_qk_impacts = attn_qk_impacts_numba
else:
    matmul = matmul_numpy
    softmax_rows = softmax_rows_numpy
    silu = silu_numpy
    rmsnorm_rows = rmsnorm_rows_numpy
    frobenius_norm = frobenius_norm_numpy
    ffn_impacts = ffn_impacts_numpy
    attn_v_impacts = attn_v_impacts_numpy
    attn_qk_impacts = attn_qk_impacts_numpy
