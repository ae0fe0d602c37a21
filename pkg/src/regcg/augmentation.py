"""Augmentation spaces for CG: kernel bases and recycled Ritz vectors."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .operators import as_linear_map

log = logging.getLogger(__name__)

KERNEL = "kernel"
RITZ = "ritz"
_LABEL_CODES = {KERNEL: 0, RITZ: 1}
_MAGIC = b"RCGBASIS"


class SingularBasisError(np.linalg.LinAlgError):
    def __init__(self, message, columns):
        super().__init__(message)
        self.columns = columns


def _dependent_columns(G, rtol=1e-12):
    """Indices whose diagonal pivot collapses in a Gram-Schmidt sweep of ``G``."""
    n = G.shape[0]
    bad = []
    keep = []
    scale = max(np.abs(np.diag(G)).max(), 1e-300) if n else 1.0
    for j in range(n):
        if keep:
            K = G[np.ix_(keep, keep)]
            g = G[keep, j]
            resid = G[j, j] - g @ np.linalg.lstsq(K, g, rcond=None)[0]
        else:
            resid = G[j, j]
        if resid <= rtol * scale:
            bad.append(j)
        else:
            keep.append(j)
    return bad


@dataclass(frozen=True)
class AugmentationBasis:
    """Columns ``C`` with ``AC = A C`` and a Cholesky factor of ``C^T A C``."""

    C: np.ndarray
    AC: np.ndarray
    labels: tuple
    factor: tuple | None

    @classmethod
    def build(cls, C, A=None, AC=None, labels=None):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if C.shape[0] == 1 and C.shape[1] > 1 and labels is None:
            C = C.T
        k = C.shape[1]
        if AC is None:
            if A is None:
                raise ValueError("either A or AC is required")
            AC = as_linear_map(A).apply_columns(C)
        AC = np.asarray(AC, dtype=float).reshape(C.shape)
        labels = tuple(labels) if labels is not None else (KERNEL,) * k
        if len(labels) != k:
            raise ValueError("one label per column is required")
        if k == 0:
            return cls(C, AC, labels, None)
        G = C.T @ AC
        G = 0.5 * (G + G.T)
        try:
            factor = cho_factor(G, lower=True)
            if not np.all(np.diag(factor[0]) > 0):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            bad = _dependent_columns(G)
            raise SingularBasisError(
                f"C^T A C is singular; dependent columns {bad}", bad) from None
        return cls(C, AC, labels, factor)

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((n, 0)), np.zeros((n, 0)), (), None)

    @property
    def size(self) -> int:
        return self.C.shape[1]

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    def gram(self):
        return self.C.T @ self.AC

    def _solve(self, y):
        return cho_solve(self.factor, y)

    def coarse_correction(self, r):
        """``C (C^T A C)^-1 C^T r``."""
        if self.size == 0:
            return np.zeros(self.dim)
        return self.C @ self._solve(self.C.T @ r)

    def project(self, v):
        """``P v = v - C (C^T A C)^-1 (AC)^T v``; output is A-orthogonal to ``C``."""
        if self.size == 0:
            return np.array(v, dtype=float, copy=True)
        return v - self.C @ self._solve(self.AC.T @ v)

    def project_transpose(self, r):
        """``P^T r = r - AC (C^T A C)^-1 C^T r``; output satisfies ``C^T r = 0``."""
        if self.size == 0:
            return np.array(r, dtype=float, copy=True)
        return r - self.AC @ self._solve(self.C.T @ r)

    def save(self, path):
        """Flat binary: magic, dim, count, label bytes, then C and AC column-major."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<QQ", self.dim, self.size))
            fh.write(bytes(_LABEL_CODES[l] for l in self.labels))
            fh.write(np.asarray(self.C, dtype="<f8").tobytes(order="F"))
            fh.write(np.asarray(self.AC, dtype="<f8").tobytes(order="F"))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        if data[: len(_MAGIC)] != _MAGIC:
            raise ValueError(f"{path}: not an augmentation basis file")
        off = len(_MAGIC)
        dim, count = struct.unpack_from("<QQ", data, off)
        off += 16
        names = {v: k for k, v in _LABEL_CODES.items()}
        labels = tuple(names[b] for b in data[off: off + count])
        off += count
        nbytes = 8 * dim * count
        if len(data) != off + 2 * nbytes:
            raise ValueError(f"{path}: truncated basis file")
        C = np.frombuffer(data, "<f8", dim * count, off).reshape((dim, count), order="F")
        AC = np.frombuffer(data, "<f8", dim * count, off + nbytes).reshape((dim, count), order="F")
        return cls.build(C.copy(), AC=AC.copy(), labels=labels)


def augmented_init(x00, b, basis: AugmentationBasis, A):
    """Initial guess with the component in ``Range(C)`` solved exactly.

    Returns ``(x0, r0)`` with ``x0 = x00 + C (C^T A C)^-1 C^T r00`` and
    ``C^T r0 = 0``.
    """
    A = as_linear_map(A)
    x00 = np.asarray(x00, dtype=float)
    r00 = np.asarray(b, dtype=float) - A.apply(x00)
    if basis is None or basis.size == 0:
        return x00.copy(), r00
    y = basis._solve(basis.C.T @ r00)
    x0 = x00 + basis.C @ y
    r0 = r00 - basis.AC @ y
    return x0, r0


def project(basis: AugmentationBasis, v):
    return basis.project(v)


@dataclass
class KernelReport:
    passed: bool
    residuals: np.ndarray
    tolerance: float
    violations: list

    def __bool__(self):
        return self.passed


def estimate_norm(M, n_iter=30, seed=0):
    """Power-iteration estimate of the spectral norm of a symmetric map."""
    M = as_linear_map(M)
    v = np.random.default_rng(seed).standard_normal(M.dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(n_iter):
        w = M.apply(v)
        est = np.linalg.norm(w)
        if est == 0.0:
            break
        v = w / est
    return est


def kernel_basis_check(C0, M, rtol=1e-8) -> KernelReport:
    """Check that every column of ``C0`` lies in the kernel of ``M``.

    Each column is normalized and ``||M c||`` compared with ``rtol * ||M||``.
    """
    C0 = np.asarray(C0, dtype=float)
    if C0.ndim == 1:
        C0 = C0[:, None]
    M = as_linear_map(M)
    tol = rtol * estimate_norm(M)
    res = np.empty(C0.shape[1])
    for j in range(C0.shape[1]):
        c = C0[:, j]
        nrm = np.linalg.norm(c)
        res[j] = np.linalg.norm(M.apply(c / nrm)) if nrm > 0 else np.inf
    bad = [int(j) for j in np.flatnonzero(res > tol)]
    return KernelReport(not bad, res, tol, bad)


def recycle(basis: AugmentationBasis, ritz, AV, keep: int | None = None,
            normalized=False) -> AugmentationBasis:
    """Append the leading ``keep`` Ritz vectors to ``basis``.

    ``AV`` is ``A V`` for the Ritz vectors (see :func:`regcg.ritz.ritz_apply_A`).
    Unless ``normalized`` is set, columns are first scaled so that
    ``V^T A V = I``. ``keep`` defaults to ``ceil(0.85 m)`` and is limited to the
    leading block that passed the M-orthonormality check. Columns that make
    ``C^T A C`` singular are dropped with a warning.
    """
    from .ritz import a_normalize

    if keep is None:
        keep = math.ceil(0.85 * ritz.theta.size)
    keep = int(keep)
    if keep <= 0:
        return basis
    if keep > ritz.ortho_ok:
        log.warning("Ritz set degraded: keeping %d columns instead of %d", ritz.ortho_ok, keep)
        keep = ritz.ortho_ok
    if normalized:
        V, AVn = ritz.V, np.asarray(AV)
    else:
        V, AVn = a_normalize(ritz, AV)
    V, AVn = V[:, :keep], AVn[:, :keep]
    C = np.hstack([basis.C, V])
    AC = np.hstack([basis.AC, AVn])
    labels = basis.labels + (RITZ,) * V.shape[1]
    while True:
        try:
            return AugmentationBasis.build(C, AC=AC, labels=labels)
        except SingularBasisError as err:
            drop = [j for j in err.columns if labels[j] == RITZ] or err.columns
            log.warning("dropping dependent augmentation columns %s", drop)
            mask = np.ones(C.shape[1], dtype=bool)
            mask[drop] = False
            C, AC = C[:, mask], AC[:, mask]
            labels = tuple(l for l, k in zip(labels, mask) if k)
