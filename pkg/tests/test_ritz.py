import numpy as np
import pytest

from regcg.operators import DenseMap, generalized_eig
from regcg.pcg import SolveConfig, pcg_solve
from regcg.ritz import (RitzSet, build_tridiagonal, corner_index, filtered_solution,
                        median_smooth, picard_cutoff, picard_table, ritz_apply_A, ritz_lcurve,
                        ritz_value_drift, ritz_vectors, write_lcurve_csv, write_picard_csv)
from regcg.tikhonov import TikhonovSystem, solve_regularized

from conftest import rel, spread_pair


def full_run(rng, n=12, lam=0.0, bM=False, x0=None):
    """Full-dimension regularized solve with Ritz data."""
    A, M, mu = spread_pair(rng, n)
    bA = rng.standard_normal(n)
    bm = rng.standard_normal(n) if bM else None
    sys = TikhonovSystem(DenseMap(A), DenseMap(M), bA, bm, lam)
    cfg = SolveConfig(eps=1e-15, max_iter=n)
    sol = solve_regularized(sys, DenseMap(np.linalg.inv(M)), cfg, want_ritz=True,
                            reorthogonalize=True, x00=x0)
    return A, M, mu, sys, sol


def test_tridiagonal_is_projected_operator(rng):
    A, M, _ = spread_pair(rng, 10)
    res = pcg_solve(DenseMap(A), DenseMap(np.linalg.inv(M)), rng.standard_normal(10),
                    cfg=SolveConfig(eps=1e-15, max_iter=10), store=True, reorthogonalize=True)
    Z = res.trace.require_z()
    g = np.asarray(res.trace.gammas[: res.trace.m])
    Zh = Z * ((-1.0) ** np.arange(Z.shape[1]) / np.sqrt(g))
    T = build_tridiagonal(res.trace).to_dense()
    assert np.allclose(Zh.T @ A @ Zh, T, atol=1e-10 * np.abs(T).max())
    assert np.allclose(Zh.T @ M @ Zh, np.eye(T.shape[0]), atol=1e-10)


def test_build_tridiagonal_needs_iterations():
    res = pcg_solve(DenseMap(np.eye(2)), DenseMap(np.eye(2)), np.zeros(2))
    with pytest.raises(ValueError):
        build_tridiagonal(res.trace)


@pytest.mark.parametrize("lam", [0.0, 1e-3, 1.0])
def test_full_dimension_ritz_pairs(rng, lam):
    A, M, mu, sys, sol = full_run(rng, lam=lam)
    R = sol.ritz
    assert R.theta.size == 12
    assert np.allclose(np.sort(R.theta)[::-1], generalized_eig(A, M).values, rtol=1e-8)
    assert np.allclose(R.V.T @ M @ R.V, np.eye(12), atol=1e-8)
    H = R.V.T @ (A + lam * M) @ R.V
    assert np.allclose(H, np.diag(R.theta + lam), atol=1e-8 * (R.theta[0] + lam))
    assert R.ortho_ok == 12 and not R.degraded


def test_ritz_apply_A_from_stored_q(rng):
    A, M, _, sys, sol = full_run(rng, lam=0.5)
    AV = sol.AV
    assert rel(AV, (A + 0.5 * M) @ sol.ritz.V) < 1e-10


def test_filtered_solution_reproduces_solve(rng):
    A, M, _, sys, sol = full_run(rng, lam=0.1, bM=True)
    R = sol.ritz
    x = filtered_solution(R, R.x0, 0.1)
    direct = np.linalg.solve(A + 0.1 * M, sys.rhs)
    assert rel(x, direct) < 1e-8
    assert rel(x, sol.x) < 1e-8
    # zero modes leave x0
    assert np.array_equal(filtered_solution(R, R.x0, 0.1, i=0), R.x0)
    with pytest.raises(ValueError):
        filtered_solution(R, R.x0, 0.1, i=13)


def test_ritz_lcurve_against_direct_norms(rng):
    lam = 0.05
    x0 = rng.standard_normal(10)
    A, M, _, sys, sol = full_run(rng, n=10, lam=lam, bM=True, x0=x0)
    R = sol.ritz
    curve = ritz_lcurve(R, lam)
    x_true = np.linalg.solve(A, sys.b_A)
    x_lam = np.linalg.solve(A + lam * M, sys.rhs)
    Al = A + lam * M
    e0 = (x0 - x_true) @ A @ (x0 - x_true)
    r0 = (x0 - x_lam) @ Al @ (x0 - x_lam)
    for i in range(11):
        xi = filtered_solution(R, x0, lam, i=i)
        d = xi - x0
        assert curve["mnorm_sq"][i] == pytest.approx(d @ M @ d, rel=1e-8, abs=1e-12)
        ei = (xi - x_true) @ A @ (xi - x_true)
        assert curve["err_offset"][i] == pytest.approx(ei - e0, rel=1e-8, abs=1e-8 * e0)
        ri = (xi - x_lam) @ Al @ (xi - x_lam)
        assert curve["energy_drop"][i] == pytest.approx(r0 - ri, rel=1e-8, abs=1e-8 * r0)


def test_lcurve_slopes_monotone(rng):
    # with b_M = 0 and x0 = 0 each step has slope -(theta_j + 2 lam)
    for lam in (0.0, 0.3):
        _, _, _, _, sol = full_run(rng, lam=lam)
        c = ritz_lcurve(sol.ritz, lam)
        slope = np.diff(c["err_offset"]) / np.diff(c["mnorm_sq"])
        assert np.all(np.diff(slope) >= -1e-9 * np.abs(slope).max())
        assert np.allclose(slope, -(sol.ritz.theta + 2 * lam), rtol=1e-8)


def _toy_ritz(theta, rA, rM=None, lam=0.0):
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    rA = np.asarray(rA, dtype=float)
    rM = np.zeros(n) if rM is None else np.asarray(rM, dtype=float)
    return RitzSet(theta, np.eye(n), np.eye(n), rA, rM, lam, n, n, 0.0, np.zeros(n))


def test_corner_index_hand_example():
    R = _toy_ritz([10.0, 9.0, 8.0, 0.1, 0.09], np.ones(5))
    # largest jump of 1/theta is between the 3rd and 4th values
    assert corner_index(R) == 3
    with pytest.raises(ValueError):
        corner_index(_toy_ritz([1.0], [1.0]))
    with pytest.raises(ValueError):
        corner_index(_toy_ritz([1.0, -2.0], [1.0, 1.0]))


def test_picard_table_and_cutoff():
    theta = np.logspace(0, -9, 10)
    # coefficients decay like theta until index 5, then flatten at a noise floor
    rA = np.maximum(theta, 1e-5)
    R = _toy_ritz(theta, rA)
    tab = picard_table(R, smooth_width=1)
    assert tab.shape == (10, 5)
    assert np.array_equal(tab[:, 0], np.arange(1, 11))
    assert np.allclose(tab[:, 2], np.abs(rA))
    assert picard_cutoff(R, smooth_width=1) == 5
    flat = _toy_ritz(theta, theta ** 2)
    assert picard_cutoff(flat, smooth_width=1) == 10
    with pytest.raises(ValueError):
        picard_cutoff(_toy_ritz([2.0, 1.0], [1.0, 1.0]))


def test_median_smooth():
    v = np.array([1.0, 1.0, 50.0, 1.0, 1.0])
    assert np.array_equal(median_smooth(v, 3), np.ones(5))
    assert np.array_equal(median_smooth(v, 1), v)
    with pytest.raises(ValueError):
        median_smooth(v, 2)


def test_ritz_value_drift():
    a = _toy_ritz([4.0, 2.0, 1.0], np.ones(3))
    b = _toy_ritz([4.0, 2.2], np.ones(2))
    assert np.allclose(ritz_value_drift(a, b), [0.0, 0.2 / 2.2])


def test_degraded_basis_detected(rng):
    # no reorthogonalization on a long run loses M-orthogonality
    A, M, _ = spread_pair(rng, 60, lo=1e-7, hi=1.0)
    sys = TikhonovSystem(DenseMap(A), DenseMap(M), rng.standard_normal(60))
    sol = solve_regularized(sys, DenseMap(np.linalg.inv(M)), SolveConfig(eps=1e-15, max_iter=200),
                            want_ritz=True)
    assert sol.ritz.degraded
    assert sol.ritz.ortho_ok < sol.ritz.theta.size


def test_ritz_vectors_without_M_uses_residuals(rng):
    A, M, _ = spread_pair(rng, 8)
    res = pcg_solve(DenseMap(A), DenseMap(np.linalg.inv(M)), rng.standard_normal(8),
                    cfg=SolveConfig(eps=1e-15, max_iter=8), store=True, store_residuals=True,
                    reorthogonalize=True)
    R = ritz_vectors(res.trace)
    assert R.ortho_ok == R.theta.size
    assert R.ortho_error < 1e-8
    assert rel(ritz_apply_A(res.trace, R.Xi), A @ R.V) < 1e-10


def test_save_load_and_csv(tmp_path, rng):
    _, _, _, _, sol = full_run(rng, n=6, lam=0.2)
    p = tmp_path / "r.npz"
    sol.ritz.save(p)
    R = RitzSet.load(p)
    assert np.array_equal(R.V, sol.ritz.V)
    assert R.lam == 0.2 and R.m == sol.ritz.m
    write_lcurve_csv(tmp_path / "l.csv", ritz_lcurve(R, 0.2))
    write_picard_csv(tmp_path / "p.csv", picard_table(R, 0.2))
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "# i,mnorm_sq,energy_drop,err_offset"
    assert len(lines) == 8
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 7
