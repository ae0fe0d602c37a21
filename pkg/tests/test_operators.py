import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regcg.operators import (DenseMap, DiagonalMap, DimensionError, LinearMap,
                             NotPositiveDefiniteError, NotSymmetricError, as_linear_map,
                             cholesky, dense_sym_eig, generalized_eig, identity_map,
                             read_matrix_csv, shifted_map, tsvd_solve, write_matrix_csv)

from conftest import random_spd, rel


def test_linear_map_forms_agree(rng):
    A = rng.standard_normal((6, 6))
    op = DenseMap(A)
    v = rng.standard_normal(6)
    assert np.allclose(op.apply(v), A @ v)
    assert np.allclose(op(v), A @ v)
    assert np.allclose(op @ v, A @ v)
    V = rng.standard_normal((6, 3))
    assert np.allclose(op.apply_columns(V), A @ V)
    free = LinearMap(6, lambda x: A @ x)
    assert np.allclose(free.to_dense(), A)
    assert free.kind == "matrix-free"


def test_dimension_checks(rng):
    with pytest.raises(DimensionError):
        DenseMap(rng.standard_normal((3, 4)))
    with pytest.raises(DimensionError):
        DenseMap(np.eye(3)).apply(np.ones(4))


def test_diagonal_and_identity():
    d = np.array([1.0, 2.0, 3.0])
    assert np.allclose(DiagonalMap(d).to_dense(), np.diag(d))
    assert np.allclose(identity_map(3).apply(d), d)
    assert as_linear_map(np.diag(d)).kind == "dense"


def test_shifted_map_is_sum(rng):
    A, M = random_spd(rng, 5), random_spd(rng, 5)
    op = shifted_map(DenseMap(A), DenseMap(M), 0.7)
    assert op.kind == "shifted-sum"
    assert np.allclose(op.to_dense(), A + 0.7 * M)
    assert np.allclose(shifted_map(DenseMap(A), DenseMap(M), 0.0).to_dense(), A)


def test_dense_sym_eig_matches_lapack(rng):
    for n in (1, 2, 5, 8, 17):
        A = rng.standard_normal((n, n))
        A = A + A.T
        spec = dense_sym_eig(A)
        assert np.all(np.diff(spec.values) <= 0)
        assert np.allclose(spec.values, np.sort(np.linalg.eigvalsh(A))[::-1], atol=1e-10)
        assert np.allclose(spec.vectors.T @ spec.vectors, np.eye(n), atol=1e-10)
        assert rel(spec.reconstruct(), A) < 1e-12


def test_dense_sym_eig_rejects_nonsymmetric():
    with pytest.raises(NotSymmetricError):
        dense_sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_dense_sym_eig_graded_spectrum(rng):
    # eigenvalues spread over 14 decades keep small relative errors in the large ones
    Q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    lam = np.logspace(0, -14, 12)
    spec = dense_sym_eig((Q * lam) @ Q.T)
    assert np.allclose(spec.values[:6], lam[:6], rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_dense_sym_eig_property(n, seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((n, n))
    A = A + A.T
    spec = dense_sym_eig(A)
    assert rel(spec.reconstruct(), A) < 1e-10


def test_cholesky_reports_pivot():
    L = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert np.allclose(L @ L.T, [[4.0, 2.0], [2.0, 3.0]])
    with pytest.raises(NotPositiveDefiniteError) as err:
        cholesky(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]))
    assert err.value.pivot == 2


def test_generalized_eig_oracle(rng):
    A, M = random_spd(rng, 7), random_spd(rng, 7, 10)
    spec = generalized_eig(A, M)
    W = spec.vectors
    assert np.allclose(W.T @ M @ W, np.eye(7), atol=1e-10)
    assert np.allclose(W.T @ A @ W, np.diag(spec.values), atol=1e-10)
    ref = np.sort(np.linalg.eigvals(np.linalg.solve(M, A)).real)[::-1]
    assert np.allclose(spec.values, ref, rtol=1e-8)


def test_tsvd_solve():
    A = np.diag([10.0, 1.0, 1e-6])
    b = np.array([10.0, 2.0, 1.0])
    assert np.allclose(tsvd_solve(A, b, 1e-3), [1.0, 2.0, 0.0])
    assert np.allclose(tsvd_solve(A, b, 1e-9), [1.0, 2.0, 1e6])
    with pytest.raises(ValueError):
        tsvd_solve(np.zeros((2, 2)), np.ones(2), 1e-3)


def test_matrix_csv_round_trip(tmp_path, rng):
    A = rng.standard_normal((4, 3)) * 10.0 ** rng.integers(-300, 300, (4, 3))
    p = tmp_path / "a.csv"
    write_matrix_csv(p, A)
    assert np.array_equal(read_matrix_csv(p), A)
