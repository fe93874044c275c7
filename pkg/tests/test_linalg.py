import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcom.errors import ParameterError, ShapeError, ValidationError
from dcom.linalg import (
    as_matrix,
    as_vector,
    frobenius_norm,
    matmul,
    orthogonalize_against,
    svd_oracle,
)
from oracles import naive_matmul, projector, rel, singular_values_via_eigen


def test_matmul_identity():
    b = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(matmul(np.eye(3), b), b)


def test_matmul_permutation():
    out = matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(out, [[2, 1], [4, 3]])
    assert out.dtype == np.float32


def test_matmul_vs_naive_loops():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() <= 1e-5


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_matmul_associativity(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.standard_normal(s) for s in ((m, k), (k, n), (n, p)))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert rel(left, right) <= 1e-4 or np.linalg.norm(right) < 1e-6


def test_matmul_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((30, 20)), rng.standard_normal((20, 10))
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


def test_frobenius():
    assert frobenius_norm(np.zeros((3, 3))) == 0
    assert frobenius_norm(np.eye(4)) == 2
    assert frobenius_norm([[3, 4]]) == 5


def test_validation_rejects_nonfinite():
    with pytest.raises(ValidationError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ValidationError):
        as_vector([np.inf])
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])


def _orthonormal(n, k, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, k)))
    return q


def test_orthogonalize_parallel_input_breaks_down():
    q = _orthonormal(10, 3)
    res = orthogonalize_against(q[:, 0], q)
    assert res.breakdown
    assert res.norm < 1e-12


def test_orthogonalize_already_orthogonal():
    q = _orthonormal(10, 3)
    z = projector(np.random.default_rng(5).standard_normal(10), q)
    res = orthogonalize_against(z, q)
    assert not res.breakdown
    assert res.norm == pytest.approx(np.linalg.norm(z), rel=1e-12)
    np.testing.assert_allclose(res.vector, z / np.linalg.norm(z), atol=1e-12)


def test_orthogonalize_matches_projector():
    q = _orthonormal(40, 6, seed=2)
    z = np.random.default_rng(7).standard_normal(40)
    res = orthogonalize_against(z, [q[:, i] for i in range(6)])
    ref = projector(z, q)
    assert np.abs(res.vector * res.norm - ref).max() <= 1e-5
    assert np.abs(q.T @ res.vector).max() <= 1e-4


def test_orthogonalize_idempotent():
    q = _orthonormal(25, 4, seed=4)
    z = np.random.default_rng(8).standard_normal(25)
    once = orthogonalize_against(z, q).vector
    twice = orthogonalize_against(once, q).vector
    assert np.abs(once - twice).max() <= 1e-5


def test_orthogonalize_passes_validated():
    with pytest.raises(ParameterError):
        orthogonalize_against(np.ones(3), [], passes=0)


def test_svd_diag():
    u, s, v = svd_oracle(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(s, [3, 2, 1], atol=1e-12)


def test_svd_rank_one():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(6), rng.standard_normal(4)
    _, s, _ = svd_oracle(np.outer(x, y))
    assert s[0] == pytest.approx(np.linalg.norm(x) * np.linalg.norm(y), rel=1e-10)
    assert np.all(np.abs(s[1:]) < 1e-10)


@pytest.mark.parametrize("shape", [(20, 12), (12, 20), (33, 33), (5, 1)])
def test_svd_contract(shape):
    a = np.random.default_rng(11).standard_normal(shape)
    u, s, v = svd_oracle(a)
    p = min(shape)
    assert u.shape == (shape[0], p) and v.shape == (p, shape[1])
    assert np.abs(u.T @ u - np.eye(p)).max() <= 1e-4
    assert np.abs(v @ v.T - np.eye(p)).max() <= 1e-4
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
    assert np.linalg.norm(a - u @ np.diag(s) @ v) <= 1e-4 * np.linalg.norm(a)
    lead = np.abs(u).argmax(axis=0)
    assert np.all(u[lead, np.arange(p)] >= 0)


def test_svd_zero_matrix():
    u, s, v = svd_oracle(np.zeros((4, 3)))
    np.testing.assert_array_equal(s, 0)
    assert np.abs(u.T @ u - np.eye(3)).max() <= 1e-10
    assert np.abs(v @ v.T - np.eye(3)).max() <= 1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7), st.integers(0, 2**31))
def test_svd_matches_eigen_oracle(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    _, s, _ = svd_oracle(a)
    ref = singular_values_via_eigen(a)
    assert np.abs(s - ref).max() <= 1e-3 * ref[0]


def test_svd_size_guard():
    with pytest.raises(ParameterError):
        svd_oracle(np.zeros((1025, 1025)))
