"""Symmetric linear maps and small dense linear algebra.

Everything here is real and symmetric. Dense routines are meant for
reference solutions, baselines and tests (n up to a few hundred); the
iterative solvers only ever call :meth:`LinearMap.apply`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Operands with incompatible sizes."""


class NotSymmetricError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """An iterative dense routine did not reach its tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class NotPositiveDefiniteError(ValueError):
    def __init__(self, message, pivot):
        super().__init__(message)
        self.pivot = pivot


class LinearMap:
    """A symmetric linear operator known through its action on vectors.

    ``kind`` is one of ``"dense"``, ``"diagonal"``, ``"shifted-sum"`` or
    ``"matrix-free"`` and is informational only.
    """

    symmetric = True

    def __init__(self, dim: int, apply: Callable[[np.ndarray], np.ndarray], kind="matrix-free"):
        if dim <= 0:
            raise DimensionError(f"dimension must be positive, got {dim}")
        self.dim = int(dim)
        self._apply = apply
        self.kind = kind

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise DimensionError(f"vector of length {v.shape[0]} applied to map of dim {self.dim}")
        return self._apply(v)

    def __call__(self, v):
        return self.apply(v)

    def __matmul__(self, v):
        return self.apply(v)

    def apply_columns(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            return self.apply(V)
        out = np.empty_like(V)
        for j in range(V.shape[1]):
            out[:, j] = self.apply(V[:, j])
        return out

    def to_dense(self) -> np.ndarray:
        return self.apply_columns(np.eye(self.dim))

    def __repr__(self):
        return f"<LinearMap kind={self.kind} dim={self.dim}>"


class DenseMap(LinearMap):
    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionError(f"expected a square matrix, got shape {matrix.shape}")
        self.matrix = matrix
        super().__init__(matrix.shape[0], matrix.__matmul__, kind="dense")

    def apply_columns(self, V):
        return self.matrix @ np.asarray(V, dtype=float)

    def to_dense(self):
        return self.matrix.copy()


class DiagonalMap(LinearMap):
    def __init__(self, diagonal):
        diagonal = np.asarray(diagonal, dtype=float).ravel()
        self.diagonal = diagonal
        super().__init__(diagonal.size, lambda v: diagonal * v, kind="diagonal")

    def apply_columns(self, V):
        V = np.asarray(V, dtype=float)
        return self.diagonal[:, None] * V if V.ndim == 2 else self.diagonal * V

    def to_dense(self):
        return np.diag(self.diagonal)


def identity_map(n: int) -> DiagonalMap:
    return DiagonalMap(np.ones(n))


def as_linear_map(op) -> LinearMap:
    """Wrap arrays (2-D dense, 1-D diagonal) so they can be used as maps."""
    if isinstance(op, LinearMap):
        return op
    arr = np.asarray(op, dtype=float)
    if arr.ndim == 1:
        return DiagonalMap(arr)
    return DenseMap(arr)


def shifted_map(A, M, lam: float) -> LinearMap:
    """Return the map ``v -> A v + lam M v`` without materializing it."""
    A = as_linear_map(A)
    M = as_linear_map(M)
    if A.dim != M.dim:
        raise DimensionError(f"A has dim {A.dim} but M has dim {M.dim}")
    if lam < 0:
        raise ValueError(f"shift must be non-negative, got {lam}")
    lam = float(lam)
    if lam == 0.0:
        op = LinearMap(A.dim, A.apply, kind="shifted-sum")
    else:
        op = LinearMap(A.dim, lambda v: A.apply(v) + lam * M.apply(v), kind="shifted-sum")
    op.parts = (A, M, lam)
    return op


@dataclass(frozen=True)
class DenseSpectrum:
    """Eigenvalues sorted in decreasing order with matching unit columns."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _check_symmetric(A, tol=1e-8):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    scale = np.abs(A).max() if A.size else 0.0
    if scale > 0 and np.abs(A - A.T).max() > tol * scale:
        raise NotSymmetricError(
            f"matrix is not symmetric (max asymmetry {np.abs(A - A.T).max():.3e})")
    return A


def _round_robin(n):
    """Pairings for one parallel Jacobi sweep (n even): n-1 rounds of n/2 disjoint pairs."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        top = players[: n // 2]
        bottom = players[n // 2:][::-1]
        p = np.array([min(a, b) for a, b in zip(top, bottom)])
        q = np.array([max(a, b) for a, b in zip(top, bottom)])
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def dense_sym_eig(A, max_sweeps=50, rtol=1e-12) -> DenseSpectrum:
    """Eigendecomposition of a dense symmetric matrix by cyclic Jacobi rotations.

    Rotations are grouped in round-robin order so that each round acts on
    disjoint index pairs and can be applied as a block. Iteration stops once
    the off-diagonal Frobenius norm drops below ``rtol * ||A||_F``.
    """
    A = _check_symmetric(A)
    n = A.shape[0]
    if n == 0:
        return DenseSpectrum(np.zeros(0), np.zeros((0, 0)))
    work = 0.5 * (A + A.T)
    if n % 2:
        # a decoupled zero row keeps the pairing even; it is dropped afterwards
        work = np.pad(work, ((0, 1), (0, 1)))
    size = work.shape[0]
    V = np.eye(size)
    fro = np.linalg.norm(work)
    rounds = _round_robin(size) if size > 1 else []

    def off_norm(B):
        return np.linalg.norm(B - np.diag(np.diag(B)))

    off = off_norm(work)
    sweeps = 0
    while fro > 0 and off > rtol * fro:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {off:.3e})",
                achieved=off)
        for p, q in rounds:
            apq = work[p, q]
            app = work[p, p]
            aqq = work[q, q]
            active = np.abs(apq) > 1e-300
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                tau = np.where(active, (aqq - app) / np.where(active, 2.0 * apq, 1.0), 0.0)
                root = np.where(np.abs(tau) < 1e150, np.sqrt(1.0 + tau * tau), np.abs(tau))
                t = np.where(active, np.sign(tau) / (np.abs(tau) + root), 0.0)
            t = np.where(active & (tau == 0.0), 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cp, cq = work[:, p].copy(), work[:, q].copy()
            work[:, p] = c * cp - s * cq
            work[:, q] = s * cp + c * cq
            rp, rq = work[p, :].copy(), work[q, :].copy()
            work[p, :] = c[:, None] * rp - s[:, None] * rq
            work[q, :] = s[:, None] * rp + c[:, None] * rq
            work[p, q] = 0.0
            work[q, p] = 0.0
            vp, vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
        sweeps += 1
        off = off_norm(work)

    values = np.diag(work).copy()
    if size != n:
        # the padded index never mixes with the others
        values, V = values[:n], V[:n, :n]
    order = np.argsort(-values, kind="stable")
    return DenseSpectrum(values[order], V[:, order])


def cholesky(M) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotPositiveDefiniteError` naming the pivot."""
    M = _check_symmetric(M)
    n = M.shape[0]
    L = np.zeros_like(M)
    for j in range(n):
        d = M[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite: pivot {j} is {d:.3e}", pivot=j)
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (M[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _forward(L, B):
    X = np.array(B, dtype=float, copy=True)
    for i in range(L.shape[0]):
        X[i] = (X[i] - L[i, :i] @ X[:i]) / L[i, i]
    return X


def generalized_eig(A, M) -> DenseSpectrum:
    """Solve ``A v = mu M v`` for SPD ``M``; vectors are M-orthonormal."""
    A = _check_symmetric(A)
    M = _check_symmetric(M)
    if A.shape != M.shape:
        raise DimensionError(f"A is {A.shape} but M is {M.shape}")
    L = cholesky(M)
    Y = _forward(L, A)             # L^-1 A
    B = _forward(L, Y.T).T         # L^-1 A L^-T
    spec = dense_sym_eig(0.5 * (B + B.T))
    # v = L^-T y
    W = np.linalg.solve(L.T, spec.vectors)
    return DenseSpectrum(spec.values, W)


def tsvd_solve(A, b, eps_sigma: float) -> np.ndarray:
    """Truncated spectral solve keeping eigenvalues above ``eps_sigma * sigma_1``."""
    if not 0.0 < eps_sigma < 1.0:
        raise ValueError(f"eps_sigma must lie in (0, 1), got {eps_sigma}")
    spec = dense_sym_eig(A)
    sigma1 = spec.values[0] if spec.values.size else 0.0
    if sigma1 <= 0.0:
        raise ValueError("zero operator")
    keep = spec.values > eps_sigma * sigma1
    U = spec.vectors[:, keep]
    return U @ ((U.T @ np.asarray(b, dtype=float)) / spec.values[keep])


def write_matrix_csv(path, A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", newline="") as fh:
        for row in A:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(t) for t in line.split(",")])
    return np.array(rows, dtype=float)
