"""Ritz elements of a CG run and the diagnostics built on them.

After ``m`` iterations on ``A_lam = A + lam M`` preconditioned by ``M``,
the CG coefficients define a tridiagonal matrix whose eigenpairs give
M-orthonormal Ritz vectors ``V`` with ``V^T A_lam V = diag(theta + lam)``.
The :class:`RitzSet` stores the *unshifted* values ``theta`` together with
the solve shift so the same set serves every other weight.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter as _median1d

from .operators import as_linear_map, dense_sym_eig
from .pcg import SolveTrace

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-4


@dataclass(frozen=True)
class TridiagonalMatrix:
    diag: np.ndarray
    offdiag: np.ndarray

    @property
    def m(self) -> int:
        return self.diag.size

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)


def build_tridiagonal(trace: SolveTrace) -> TridiagonalMatrix:
    """Lanczos matrix ``T_m`` from the CG coefficients of ``trace``."""
    m = trace.m
    if m < 1:
        raise ValueError("no iterations recorded")
    alpha = trace.alphas
    beta = trace.betas
    for j, a in enumerate(alpha):
        if a == 0.0:
            raise ZeroDivisionError(f"alpha is zero at iteration {j}")
    mu = 1.0 / alpha
    mu[1:] += beta[:-1] / alpha[:-1]
    eta = np.sqrt(np.maximum(beta[:-1], 0.0)) / alpha[:-1]
    return TridiagonalMatrix(mu, eta)


def tridiag_eig(T: TridiagonalMatrix):
    """Eigenvalues (descending) and orthonormal eigenvectors of ``T``."""
    spec = dense_sym_eig(T.to_dense())
    return spec.values, spec.vectors


@dataclass(frozen=True)
class RitzSet:
    """Ritz values of ``(A, M)`` and M-orthonormal Ritz vectors.

    ``theta`` excludes the solve shift ``lam``; ``rA`` and ``rM`` are the
    projections of the split initial residual. ``ortho_ok`` is the size of
    the leading block whose M-Gram matrix is within ``1e-4`` of identity.
    """

    theta: np.ndarray
    V: np.ndarray
    Xi: np.ndarray
    rA: np.ndarray
    rM: np.ndarray
    lam: float = 0.0
    m: int = 0
    ortho_ok: int = 0
    ortho_error: float = 0.0
    x0: np.ndarray | None = field(default=None, repr=False)

    @property
    def degraded(self) -> bool:
        return self.ortho_ok < self.theta.size

    @property
    def system_values(self) -> np.ndarray:
        """Ritz values of the operator actually solved, ``theta + lam``."""
        return self.theta + self.lam

    def with_residuals(self, rA0, rM0=None):
        rA = self.V.T @ np.asarray(rA0, dtype=float)
        rM = np.zeros_like(rA) if rM0 is None else self.V.T @ np.asarray(rM0, dtype=float)
        return RitzSet(self.theta, self.V, self.Xi, rA, rM, self.lam, self.m,
                       self.ortho_ok, self.ortho_error, self.x0)

    def save(self, path):
        np.savez(path, theta=self.theta, V=self.V, Xi=self.Xi, rA=self.rA, rM=self.rM,
                 lam=self.lam, m=self.m, ortho_ok=self.ortho_ok,
                 ortho_error=self.ortho_error,
                 x0=self.x0 if self.x0 is not None else np.zeros(0))

    @classmethod
    def load(cls, path):
        with np.load(path) as d:
            x0 = d["x0"]
            return cls(d["theta"], d["V"], d["Xi"], d["rA"], d["rM"], float(d["lam"]),
                       int(d["m"]), int(d["ortho_ok"]), float(d["ortho_error"]),
                       x0 if x0.size else None)


def _signed_normalized(cols, gammas):
    signs = np.where(np.arange(cols.shape[1]) % 2 == 0, 1.0, -1.0)
    return cols * (signs / np.sqrt(gammas))


def _leading_ok(G, tol=ORTHO_TOL):
    dev = np.abs(G - np.eye(G.shape[0]))
    k = 0
    while k < G.shape[0] and dev[: k + 1, : k + 1].max() <= tol:
        k += 1
    return k, float(dev.max()) if dev.size else 0.0


def ritz_vectors(trace: SolveTrace, Xi=None, theta_sys=None, lam=0.0, rA0=None, rM0=None,
                 M=None) -> RitzSet:
    """Assemble the :class:`RitzSet` of a finished solve.

    ``Xi``/``theta_sys`` default to the eigen-decomposition of the trace's
    tridiagonal matrix; ``theta_sys`` are eigenvalues of the solved operator
    and ``lam`` is subtracted from them. ``rA0`` defaults to the solve's
    initial residual and ``rM0`` to zero. The M-orthonormality check uses
    ``M`` when given, otherwise stored residuals (``M z_j = r_j``), and is
    skipped when neither is available.
    """
    Z = trace.require_z()
    gam = np.asarray(trace.gammas[: trace.m])
    if Xi is None or theta_sys is None:
        theta_sys, Xi = tridiag_eig(build_tridiagonal(trace))
    Zh = _signed_normalized(Z, gam)
    V = Zh @ Xi
    if M is not None:
        G = V.T @ as_linear_map(M).apply_columns(V)
    elif trace.r_store is not None:
        Rh = _signed_normalized(np.column_stack(trace.r_store[: trace.m]), gam)
        G = Xi.T @ (Zh.T @ Rh) @ Xi
        G = 0.5 * (G + G.T)
    else:
        G = None
    if G is None:
        ok, err = len(theta_sys), 0.0
    else:
        ok, err = _leading_ok(G)
        if ok < len(theta_sys):
            log.warning("Ritz basis degraded: V^T M V deviates by %.2e, %d/%d columns usable",
                        err, ok, len(theta_sys))
    r0 = trace.r0 if rA0 is None else rA0
    rA = V.T @ r0
    rM = np.zeros_like(rA) if rM0 is None else V.T @ rM0
    return RitzSet(np.asarray(theta_sys) - lam, V, Xi, rA, rM, float(lam), trace.m, ok, err,
                   trace.x0.copy())


def ritz_apply_A(trace: SolveTrace, Xi) -> np.ndarray:
    """``A V`` from stored ``q`` vectors, no operator application.

    Uses ``A z_0 = q_0`` and ``A z_{j+1} = q_{j+1} - beta_j q_j``, with the
    sign and scaling of the normalized basis.
    """
    Q = trace.require_q()
    m = trace.m
    if m < 1:
        raise ValueError("no iterations recorded")
    beta = trace.betas
    AZ = Q.copy()
    AZ[:, 1:] -= Q[:, :-1] * beta[: m - 1]
    AZh = _signed_normalized(AZ, np.asarray(trace.gammas[:m]))
    return AZh @ Xi


def a_normalize(ritz: RitzSet, AV, rtol=1e-14):
    """Scale Ritz vectors so that ``V'^T A V' = I`` for the solved operator.

    Columns whose value sits within round-off of zero are dropped with a
    warning; clearly negative values are an error.
    """
    vals = ritz.system_values
    scale = max(np.abs(vals).max(), 1.0e-300) if vals.size else 1.0
    tiny = np.abs(vals) <= rtol * scale
    if np.any((vals < 0) & ~tiny):
        bad = np.flatnonzero((vals < 0) & ~tiny)
        raise ValueError(f"non-positive Ritz values at columns {bad.tolist()}")
    keep = ~tiny
    if not keep.all():
        log.warning("dropping %d Ritz columns with round-off values", int((~keep).sum()))
    s = 1.0 / np.sqrt(vals[keep])
    return ritz.V[:, keep] * s, np.asarray(AV)[:, keep] * s


def filtered_solution(ritz: RitzSet, x0, lam: float, i: int | None = None,
                      rA=None, rM=None) -> np.ndarray:
    """Ritz reconstruction ``x0 + sum_{j<=i} (rA_j + lam rM_j)/(theta_j + lam) v_j``."""
    coef = _coefficients(ritz, lam, i, rA, rM)
    return np.asarray(x0, dtype=float) + ritz.V[:, : coef.size] @ coef


def _coefficients(ritz, lam, i, rA=None, rM=None):
    m = ritz.theta.size
    i = m if i is None else int(i)
    if not 0 <= i <= m:
        raise ValueError(f"truncation index {i} outside 0..{m}")
    rA = ritz.rA if rA is None else rA
    rM = ritz.rM if rM is None else rM
    den = ritz.theta[:i] + lam
    if np.any(den == 0.0):
        raise ZeroDivisionError(f"theta_j + lam vanishes at j={int(np.flatnonzero(den == 0)[0]) + 1}")
    return (rA[:i] + lam * rM[:i]) / den


def ritz_lcurve(ritz: RitzSet, lam: float):
    """Cumulative L-curve quantities of the Ritz reconstructions ``i = 0..m``.

    ``mnorm_sq[i]`` is ``||x~_i - x_0||_M^2``, ``energy_drop[i]`` the
    decrease of the regularized error ``||x~_i - x_lam||^2_{A_lam}`` and
    ``err_offset[i]`` is ``||x~_i - x||_A^2 - ||x_0 - x||_A^2`` for the
    unregularized solution ``x``.
    """
    c = ritz.rA + lam * ritz.rM
    den = ritz.theta + lam
    y = c / den
    mn = np.concatenate([[0.0], np.cumsum(y * y)])
    drop = np.concatenate([[0.0], np.cumsum(c * c / den)])
    off = np.concatenate([[0.0], np.cumsum(y * (ritz.theta * y - 2.0 * ritz.rA))])
    return {"mnorm_sq": mn, "energy_drop": drop, "err_offset": off}


def corner_index(ritz: RitzSet, lam: float = 0.0) -> int:
    """Number of modes before the largest jump of L-curve slope.

    The slope between reconstructions ``j-1`` and ``j`` is ``-1/(theta_j+lam)``;
    the corner maximizes ``1/(theta_{j+1}+lam) - 1/(theta_j+lam)`` and ties go
    to the smaller ``j``.
    """
    vals = ritz.theta + lam
    if vals.size < 2:
        raise ValueError("corner needs at least two Ritz values")
    if np.any(vals <= 0):
        raise ValueError("corner undefined for non-positive shifted Ritz values")
    jumps = np.diff(1.0 / vals)
    return int(np.argmax(jumps)) + 1


def median_smooth(values, width: int):
    if width < 1 or width % 2 == 0:
        raise ValueError(f"smoothing width must be odd and positive, got {width}")
    values = np.asarray(values, dtype=float)
    if width == 1 or values.size == 0:
        return values.copy()
    return _median1d(values, size=width, mode="nearest")


PICARD_FIELDS = ("j", "theta", "abs_rA", "lam_abs_rM", "abs_r_lam")


def picard_table(ritz: RitzSet, lam: float = 0.0, smooth_width: int = 5) -> np.ndarray:
    """Rows ``(j, theta_j, |rA_j|, lam |rM_j|, |rA_j + lam rM_j|)`` by decreasing theta.

    The three contribution columns are median-smoothed with ``smooth_width``.
    """
    order = np.argsort(-ritz.theta, kind="stable")
    rA = ritz.rA[order]
    rM = ritz.rM[order]
    cols = [np.abs(rA), lam * np.abs(rM), np.abs(rA + lam * rM)]
    cols = [median_smooth(c, smooth_width) for c in cols]
    j = np.arange(1, order.size + 1, dtype=float)
    return np.column_stack([j, ritz.theta[order]] + cols)


def picard_cutoff(ritz: RitzSet, lam: float = 0.0, smooth_width: int = 5) -> int:
    """Number of Ritz modes to keep according to the discrete Picard condition.

    The ratio ``|rA_j + lam rM_j| / (theta_j + lam)`` is median-smoothed; the
    cutoff is the first ``j`` after which it increases on two consecutive
    steps. Returns ``m`` when that never happens.
    """
    m = ritz.theta.size
    if m < 3:
        raise ValueError("Picard cutoff needs at least three Ritz values")
    ratio = np.abs(ritz.rA + lam * ritz.rM) / (ritz.theta + lam)
    ratio = median_smooth(ratio, smooth_width)
    up = np.diff(ratio) > 0
    for j in range(m - 2):
        if up[j] and up[j + 1]:
            return j + 1
    return m


def ritz_value_drift(earlier: RitzSet, later: RitzSet) -> np.ndarray:
    """Relative distance of each later Ritz value to the closest earlier one."""
    a = earlier.theta
    out = np.empty(later.theta.size)
    for k, t in enumerate(later.theta):
        out[k] = np.min(np.abs(a - t)) / max(abs(t), 1e-300)
    return out


def write_picard_csv(path, table):
    with open(path, "w", newline="") as fh:
        fh.write("# " + ",".join(PICARD_FIELDS) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in table:
            w.writerow([int(row[0])] + [f"{v:.17g}" for v in row[1:]])


def write_lcurve_csv(path, curve):
    keys = ("mnorm_sq", "energy_drop", "err_offset")
    with open(path, "w", newline="") as fh:
        fh.write("# i," + ",".join(keys) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for i in range(len(curve["mnorm_sq"])):
            w.writerow([i] + [f"{curve[k][i]:.17g}" for k in keys])
