import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcom.errors import ParameterError, ShapeError, ValidationError
from dcom.lanczos import (
    DecomposedMatrix,
    analytic_flops,
    convergence_study,
    lanczos_svd,
    oracle_truncation_errors,
    reconstruction_error,
    write_trace_csv,
)
from dcom.synthetic import integer_low_rank, named_spectrum, spectrum_matrix
from oracles import optimal_error


def test_identity_rank_one():
    d, _ = lanczos_svd(np.eye(4), 1)
    assert d.singular_values[0] == pytest.approx(1.0, abs=1e-6)
    assert reconstruction_error(np.eye(4), d) == pytest.approx(math.sqrt(3) / 2, abs=1e-6)


def test_diag_rank_two():
    a = np.diag([3.0, 2.0, 1.0])
    d, _ = lanczos_svd(a, 2)
    np.testing.assert_allclose(d.singular_values, [3, 2], atol=1e-6)
    assert reconstruction_error(a, d) == pytest.approx(1 / math.sqrt(14), abs=1e-6)


def test_rank_one_outer_product():
    rng = np.random.default_rng(4)
    a = np.outer(rng.standard_normal(30), rng.standard_normal(20))
    d, _ = lanczos_svd(a, 1)
    assert reconstruction_error(a, d) <= 1e-5


def test_decay_spectrum_within_oracle_bound():
    a = spectrum_matrix(128, 96, named_spectrum("decay", 96), seed=1)
    d, _ = lanczos_svd(a, 10)
    assert reconstruction_error(a, d) <= 1.1 * optimal_error(a, 10)


def test_orthogonality_and_sorting():
    a = np.random.default_rng(2).standard_normal((60, 40))
    d, _ = lanczos_svd(a, 12)
    off_u = d.U.T @ d.U - np.eye(d.r1)
    off_v = d.V @ d.V.T - np.eye(d.r2)
    assert np.abs(off_u).max() <= 1e-3
    assert np.abs(off_v).max() <= 1e-3
    s = d.singular_values
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)


def test_deterministic():
    a = np.random.default_rng(0).standard_normal((50, 30))
    d1, t1 = lanczos_svd(a, 5, seed=9)
    d2, t2 = lanczos_svd(a, 5, seed=9)
    assert d1.U.tobytes() == d2.U.tobytes()
    assert d1.V.tobytes() == d2.V.tobytes()
    assert t1.alpha == t2.alpha and t1.beta == t2.beta


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_breakdown_exact_rank(rho, seed):
    a = integer_low_rank(40, 30, rho, seed=seed)
    k = rho + 3
    d, trace = lanczos_svd(a, k)
    assert d.r1 <= rho
    assert trace.breakdown_at is not None
    assert reconstruction_error(a, d) <= 1e-4


def test_zero_matrix_gives_empty_decomposition():
    d, trace = lanczos_svd(np.zeros((5, 4)), 2)
    assert d.r1 == 0 and trace.breakdown_at == 0
    assert reconstruction_error(np.zeros((5, 4)), d) == 0


def test_parameter_errors():
    with pytest.raises(ParameterError):
        lanczos_svd(np.eye(3), 0)
    with pytest.raises(ParameterError):
        lanczos_svd(np.eye(3), 4)
    with pytest.raises(ParameterError):
        lanczos_svd(np.eye(3), 1, eps=0)
    with pytest.raises(ValidationError):
        lanczos_svd([[1.0, np.nan]], 1)


def test_trace_values_nonnegative():
    _, t = lanczos_svd(np.random.default_rng(1).standard_normal((30, 20)), 6)
    assert all(x >= 0 for x in t.alpha + t.beta)
    assert all(math.isfinite(e) for e in t.rel_error)


def test_reconstruction_error_conventions():
    d = DecomposedMatrix(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros((1, 2)))
    assert reconstruction_error(np.zeros((2, 2)), d) == 0
    a = np.eye(2)
    exact = DecomposedMatrix(np.eye(2), np.eye(2), np.eye(2))
    assert reconstruction_error(a, exact) == 0
    with pytest.raises(ShapeError):
        reconstruction_error(np.eye(3), exact)


def test_reconstruction_error_vs_explicit():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((12, 9))
    d = DecomposedMatrix(rng.standard_normal((12, 3)), np.diag(rng.random(3)), rng.standard_normal((3, 9)))
    ref = np.linalg.norm(a.astype(np.float32) - d.U @ d.Sigma @ d.V) / np.linalg.norm(a.astype(np.float32))
    assert abs(reconstruction_error(a, d) - ref) <= 1e-6


def test_full_rank_reconstruction():
    a = np.random.default_rng(3).standard_normal((15, 10))
    d, _ = lanczos_svd(a, 10)
    assert reconstruction_error(a, d) <= 1e-4


def test_oracle_truncation_matches_lapack():
    a = np.random.default_rng(0).standard_normal((30, 20))
    errs = oracle_truncation_errors(a, [1, 5, 20])
    for k, e in errs.items():
        assert e == pytest.approx(optimal_error(a.astype(np.float32), k), abs=1e-9)


def test_convergence_study_rows():
    a = spectrum_matrix(96, 64, named_spectrum("decay", 64), seed=2)
    rows, _ = convergence_study(a, [1, 10, 20])
    errs = [r["lanczos_error"] for r in rows]
    assert errs[0] >= errs[1] >= errs[2]
    for r in rows:
        assert r["lanczos_error"] >= r["oracle_error"] - 1e-6


@pytest.mark.parametrize("shape,k", [((64, 48), 5), ((100, 30), 10), ((40, 40), 1)])
def test_counters_match_analytic_formula(shape, k):
    a = np.random.default_rng(5).standard_normal(shape)
    _, t = lanczos_svd(a, k)
    assert t.breakdown_at is None
    ref = analytic_flops(*shape, t.iterations, t.passes)
    for op in ("matvec", "reorth_u", "reorth_v"):
        assert t.flops[op] == ref[op]
    assert sum(r["reorth_u"] for _, r in t.rows) == t.flops["reorth_u"]
    assert sum(r["matvec"] for _, r in t.rows) == t.flops["matvec"]


def test_reorth_share_grows_with_rank():
    a = np.random.default_rng(0).standard_normal((512, 64)).astype(np.float32)
    shares = [lanczos_svd(a, k)[1].reorth_share for k in (2, 10, 30)]
    assert shares[0] < shares[1] < shares[2]


def test_trace_csv():
    _, t = lanczos_svd(np.random.default_rng(1).standard_normal((20, 10)), 3)
    rows = list(csv.reader(io.StringIO(write_trace_csv(t))))
    assert rows[0] == ["iteration", "alpha", "beta", "rel_error", "flops_matvec",
                       "flops_reorth_u", "flops_reorth_v"]
    assert rows[1][2] == ""
    assert len(rows) == 1 + len(t.rows)
