import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from langneuron import kernels, linalg

FLAVOURS = [
    pytest.param("numba", id="numba"),
    pytest.param("numpy", id="numpy"),
]


def kernel(name, flavour):
    return getattr(kernels, f"{name}_{flavour}")


def triple_loop(a, b):
    n, inner = a.shape
    m = b.shape[1]
    out = np.empty((n, m), dtype=a.dtype)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(inner):
                acc += float(a[i, k]) * float(b[k, j])
            out[i, j] = acc
    return out


def test_matmul_identity(rng):
    m = rng.standard_normal((3, 3)).astype(np.float32)
    assert np.array_equal(linalg.matmul(np.eye(3, dtype=np.float32), m), m)


def test_matmul_hand():
    out = linalg.matmul([[1, 2], [3, 4]], [[0], [1]])
    assert out.tolist() == [[2], [4]]


@pytest.mark.parametrize("flavour", FLAVOURS)
def test_matmul_matches_triple_loop_bitwise(rng, flavour):
    a = rng.standard_normal((8, 8)).astype(np.float32)
    b = rng.standard_normal((8, 8)).astype(np.float32)
    got = kernel("matmul", flavour)(a, b)
    assert got.tobytes() == triple_loop(a, b).tobytes()


def test_matmul_shape_error():
    with pytest.raises(ValueError, match="shape"):
        linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 6).flatmap(
        lambda k: st.tuples(
            arrays(np.float32, (3, k), elements=st.floats(-4, 4, width=32)),
            arrays(np.float32, (k, 5), elements=st.floats(-4, 4, width=32)),
        )
    )
)
def test_flavours_agree_on_matmul(pair):
    a, b = pair
    assert np.array_equal(kernels.matmul_numba(a, b), kernels.matmul_numpy(a, b))


def test_softmax_uniform_row():
    out = linalg.softmax_rows(np.zeros((1, 4)))
    assert np.allclose(out, 0.25, atol=0)


def test_softmax_no_overflow():
    out = linalg.softmax_rows([[1000.0, 0.0]])
    assert abs(out[0, 0] - 1) < 1e-6 and abs(out[0, 1]) < 1e-6


@pytest.mark.parametrize("flavour", FLAVOURS)
def test_softmax_matches_float64(flavour):
    row = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    e = np.exp(np.array([1.0, 2.0, 3.0]) - 3.0)
    ref = e / e.sum()
    got = kernel("softmax_rows", flavour)(row, False)
    assert np.max(np.abs(got[0] - ref)) < 1e-6


@pytest.mark.parametrize("flavour", FLAVOURS)
def test_causal_softmax(rng, flavour):
    s = rng.standard_normal((6, 6)).astype(np.float32)
    a = kernel("softmax_rows", flavour)(s, True)
    assert np.all(np.abs(a.sum(axis=1) - 1) < 1e-5)
    assert np.all(a[np.triu_indices(6, 1)] == 0)


def test_silu_values():
    x = np.array([[0.0, 1.0, 20.0, 35.0]], dtype=np.float32)
    out = linalg.silu(x)
    assert out[0, 0] == 0
    assert abs(out[0, 1] - 1 / (1 + math.exp(-1))) < 1e-6
    assert abs(out[0, 2] - 20) < 1e-4 and abs(out[0, 3] - 35) < 1e-4


@pytest.mark.parametrize("flavour", FLAVOURS)
def test_silu_flavour_matches_reference(rng, flavour):
    x = rng.standard_normal((4, 7)).astype(np.float32) * 5
    x64 = x.astype(np.float64)
    ref = x64 / (1 + np.exp(-x64))
    assert np.max(np.abs(kernel("silu", flavour)(x) - ref)) < 1e-5


def test_hadamard():
    a = np.array([[1.0, 2.0]], dtype=np.float32)
    assert np.array_equal(linalg.hadamard(a, np.ones_like(a)), a)
    assert not linalg.hadamard(a, np.zeros_like(a)).any()
    assert linalg.hadamard(a, [[3, 4]]).tolist() == [[3, 8]]
    with pytest.raises(ValueError):
        linalg.hadamard(a, np.ones((2, 2)))


def test_frobenius_small():
    assert linalg.frobenius_norm(np.zeros((3, 2))) == 0
    assert linalg.frobenius_norm([[3, 4]]) == 5


@pytest.mark.parametrize("flavour", FLAVOURS)
def test_frobenius_matches_loop(rng, flavour):
    m = rng.standard_normal((8, 8)).astype(np.float32)
    acc = 0.0
    for x in m.ravel():
        acc += float(x) * float(x)
    ref = math.sqrt(acc)
    assert abs(kernel("frobenius_norm", flavour)(m) - ref) <= 1e-6 * ref


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 4), elements=st.floats(-100, 100, width=32)), st.floats(-8, 8))
def test_frobenius_scales(m, c):
    base = float(linalg.frobenius_norm(m))
    scaled = float(linalg.frobenius_norm(m * np.float32(c)))
    assert scaled == pytest.approx(abs(np.float32(c)) * base, rel=1e-5, abs=1e-4)


def test_rmsnorm_cases():
    ones = np.ones((1, 5), dtype=np.float32)
    assert np.allclose(linalg.rmsnorm_rows(ones, np.ones(5), 1e-12), 1, atol=1e-5)
    assert not linalg.rmsnorm_rows(np.zeros((1, 5)), np.ones(5), 1e-5).any()
    out = linalg.rmsnorm_rows([[1.0, -1.0]], np.ones(2), 1e-6)
    assert np.allclose(out, [[1, -1]], atol=1e-4)


@pytest.mark.parametrize("flavour", FLAVOURS)
def test_rmsnorm_flavours(rng, flavour):
    m = rng.standard_normal((5, 16)).astype(np.float32)
    g = rng.standard_normal(16).astype(np.float32)
    m64 = m.astype(np.float64)
    ref = m64 / np.sqrt((m64 ** 2).mean(axis=1, keepdims=True) + 1e-5) * g
    assert np.max(np.abs(kernel("rmsnorm_rows", flavour)(m, g, 1e-5) - ref)) < 1e-5


def test_outputs_finite(rng):
    m = rng.standard_normal((4, 4)).astype(np.float32) * 50
    for out in (linalg.softmax_rows(m), linalg.silu(m), linalg.rmsnorm_rows(m, np.ones(4), 1e-5)):
        assert np.isfinite(out).all()
        assert out.size == 16


def test_non_matrix_rejected():
    with pytest.raises(ValueError):
        linalg.silu(np.ones(3))
