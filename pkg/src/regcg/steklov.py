"""Cauchy data completion on a rectangle through Steklov-Poincare operators.

The Laplace problem on ``[0, T] x [0, H]`` has ``u = 0`` on ``y = 0, H``,
both ``u = u_L`` and ``du/dx = 0`` on ``x = 0`` and nothing on ``x = T``.
Two well-posed problems (Dirichlet or Neumann data on the left) define the
Schur complements ``S_D`` and ``S_N`` on the right-edge trace, and the
missing trace solves ``(S_D - S_N) u_R = b_D``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .operators import DenseMap, DiagonalMap, identity_map, tsvd_solve
from .pcg import MINRES, SolveConfig, pcg_solve
from .tikhonov import TikhonovSystem, solve_regularized


def _element_stiffness(hx, hy):
    """Bilinear element stiffness with 2x2 Gauss quadrature on an ``hx x hy`` cell."""
    g = 1.0 / math.sqrt(3.0)
    xi = np.array([-1.0, 1.0, 1.0, -1.0])
    eta = np.array([-1.0, -1.0, 1.0, 1.0])
    K = np.zeros((4, 4))
    for a in (-g, g):
        for b in (-g, g):
            dNdxi = xi * (1 + eta * b) / 4.0
            dNdeta = eta * (1 + xi * a) / 4.0
            dNdx = dNdxi * 2.0 / hx
            dNdy = dNdeta * 2.0 / hy
            K += (np.outer(dNdx, dNdx) + np.outer(dNdy, dNdy)) * (hx * hy / 4.0)
    return K


@dataclass(frozen=True)
class CauchyCase:
    H: float = 1.0
    T: float = 1.0
    k: int = 3
    n_el: int = 40
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.n_el < 4:
            raise ValueError("n_el must be at least 4")
        if self.k < 1:
            raise ValueError("wavenumber k must be at least 1")

    @property
    def trace_y(self):
        """y-coordinates of the right-edge unknowns (corners excluded)."""
        return np.arange(1, self.n_el) * self.H / self.n_el


@dataclass
class SteklovPair:
    S_D: np.ndarray
    S_N: np.ndarray
    b_D: np.ndarray
    load_map: np.ndarray = field(repr=False, default=None)

    @property
    def A(self):
        return self.S_D - self.S_N


def _assemble_stiffness(case: CauchyCase):
    n = case.n_el
    N = n + 1
    ke = _element_stiffness(case.T / n, case.H / n)
    K = np.zeros((N * N, N * N))
    for j in range(n):
        for i in range(n):
            nodes = [j * N + i, j * N + i + 1, (j + 1) * N + i + 1, (j + 1) * N + i]
            K[np.ix_(nodes, nodes)] += ke
    return K


def assemble_case(case: CauchyCase, u_left=None) -> SteklovPair:
    """Schur complements of the Q1 Laplacian onto the right-edge trace.

    ``u_left`` is the Dirichlet data at the left-edge interior nodes; it
    defaults to ``sin(k pi y / H)``. ``load_map`` maps such data to ``b_D``.
    """
    n = case.n_el
    N = n + 1
    K = _assemble_stiffness(case)
    node = lambda i, j: j * N + i  # noqa: E731
    right = [node(n, j) for j in range(1, n)]
    left = [node(0, j) for j in range(1, n)]
    inner = [node(i, j) for j in range(1, n) for i in range(1, n)]

    def schur(interior, data):
        KII = K[np.ix_(interior, interior)]
        try:
            f = cho_factor(KII, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular interior block") from exc
        rhs = np.hstack([K[np.ix_(interior, right)], K[np.ix_(interior, data)]]) if data else \
            K[np.ix_(interior, right)]
        X = cho_solve(f, rhs)
        KRI = K[np.ix_(right, interior)]
        S = K[np.ix_(right, right)] - KRI @ X[:, : len(right)]
        coupling = None
        if data:
            coupling = K[np.ix_(right, data)] - KRI @ X[:, len(right):]
        return 0.5 * (S + S.T), coupling

    S_D, coupling = schur(inner, left)
    S_N, _ = schur(inner + left, [])
    load_map = -coupling
    if u_left is None:
        u_left = np.sin(case.k * np.pi * case.trace_y / case.H)
    b_D = load_map @ np.asarray(u_left, dtype=float)
    return SteklovPair(S_D, S_N, b_D, load_map)


def analytic_trace(case: CauchyCase) -> np.ndarray:
    """Exact ``u = sin(k pi y/H) cosh(k pi x/H)`` sampled at the right-edge nodes."""
    y = case.trace_y
    return np.sin(case.k * np.pi * y / case.H) * np.cosh(case.k * np.pi * case.T / case.H)


def make_rng(seed):
    """Counter-based generator so that seeds behave the same on every platform."""
    return np.random.Generator(np.random.Philox(seed))


RNG_NAME = "numpy.random.Philox(4x64)"


def add_noise(v, snr_db: float, seed=0):
    """Add white Gaussian noise with ``||v||^2 / E||eta||^2 = 10^(snr_db/10)``.

    ``snr_db = inf`` returns an unchanged copy.
    """
    v = np.asarray(v, dtype=float)
    if math.isinf(snr_db) and snr_db > 0:
        return v.copy()
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("cannot set a signal-to-noise ratio on a zero signal")
    sigma = nv / math.sqrt(v.size * 10.0 ** (snr_db / 10.0))
    return v + sigma * make_rng(seed).standard_normal(v.shape)


@dataclass
class ComparisonResult:
    method: str
    u_R: np.ndarray
    iterates: list = field(default_factory=list)
    lcurve_euclid: np.ndarray | None = None
    lcurve_natural: np.ndarray | None = None
    trace: object = None
    ritz: object = None
    system: object = None

    def relative_error(self, reference):
        return float(np.linalg.norm(self.u_R - reference) / np.linalg.norm(reference))


def noisy_case(case: CauchyCase) -> SteklovPair:
    y = case.trace_y
    u_left = add_noise(np.sin(case.k * np.pi * y / case.H), case.snr_db, case.seed)
    return assemble_case(case, u_left)


def run_comparison(case: CauchyCase, method: str, *, eps_sigma=1e-3, reg="sd", lam=0.0,
                   prec="sd", eps=1e-9, max_iter=200, pair: SteklovPair | None = None,
                   want_ritz=True, reorthogonalize=True) -> ComparisonResult:
    """Identify the right-edge trace with one of the baseline or CG methods.

    ``method`` is ``"tsvd"`` (keeps eigenvalues above ``eps_sigma * sigma_1``),
    ``"direct"`` (dense solve of ``(S_D - S_N) + lam R`` with ``reg`` in
    ``{"id", "sd"}``) or ``"cg"`` (CG on ``(S_D - S_N) + lam S_D`` with
    ``prec`` in ``{"id", "jacobi", "sd"}``, stopped by the minres-style rule).
    """
    pair = pair if pair is not None else noisy_case(case)
    A = pair.A
    S_D = pair.S_D
    b = pair.b_D
    n = b.size
    if method == "tsvd":
        return ComparisonResult("tsvd", tsvd_solve(A, b, eps_sigma))
    if method == "direct":
        R = np.eye(n) if reg == "id" else S_D
        return ComparisonResult(f"direct-{reg}", np.linalg.solve(A + lam * R, b))
    if method != "cg":
        raise ValueError(f"unknown method {method!r}")

    sys = TikhonovSystem(DenseMap(A), DenseMap(S_D), b, None, lam)
    A_lam = A + lam * S_D
    if prec == "sd":
        f = cho_factor(S_D, lower=True)
        M_inv = DenseMap(cho_solve(f, np.eye(n)))
        M = S_D
    elif prec == "jacobi":
        d = np.diag(A_lam).copy()
        M_inv = DiagonalMap(1.0 / d)
        M = np.diag(d)
    elif prec == "id":
        M_inv = identity_map(n)
        M = np.eye(n)
    else:
        raise ValueError(f"unknown preconditioner {prec!r}")

    cfg = SolveConfig(eps=eps, max_iter=max_iter, criteria=(MINRES,))
    iterates, residuals = [], []

    def collect(i, x, r):
        iterates.append(x.copy())
        residuals.append(r.copy())

    ritz = None
    if prec == "sd":
        sol = solve_regularized(sys, M_inv, cfg, want_ritz=want_ritz,
                                reorthogonalize=reorthogonalize, callback=collect)
        res, ritz = sol.result, sol.ritz
    else:
        res = pcg_solve(DenseMap(A_lam), M_inv, b, np.zeros(n), cfg, callback=collect,
                        reorthogonalize=reorthogonalize)
    x0 = iterates[0]
    euclid = np.array([[r @ r, (x - x0) @ (x - x0)] for x, r in zip(iterates, residuals)])
    # error axis known up to ||x0 - x||_A^2: ||x_i - x||^2 - ||x_0 - x||^2 = d^T A d - 2 d^T r_0
    natural = np.array([[(x - x0) @ A_lam @ (x - x0) - 2 * (x - x0) @ residuals[0],
                         (x - x0) @ M @ (x - x0)] for x in iterates])
    return ComparisonResult(f"cg-{prec}", res.x, iterates, euclid, natural, res.trace, ritz, sys)
