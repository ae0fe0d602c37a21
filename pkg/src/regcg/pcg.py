"""Preconditioned conjugate gradient with costless norm recurrences.

The loop follows the classical Hestenes-Stiefel form with an optional
projector applied after the preconditioner (augmented CG). Every scalar
needed afterwards is recorded in a :class:`SolveTrace`: the CG
coefficients, the correction norm ``||x_i - x_0||_M``, the running
Frobenius norm of the Lanczos matrix and the energy decrements.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .operators import DimensionError, as_linear_map

log = logging.getLogger(__name__)

RESIDUAL = "residual-ratio"
MINRES = "minres-style"
STAGNATION = "stagnation"
CRITERIA = (RESIDUAL, MINRES, STAGNATION)

BREAKDOWN_TOL = 1e-300
REPROJECT_EVERY = 50
ROUNDOFF_GAMMA = 1e-24   # |gamma| / gamma_0 treated as an exact zero


class StopReason(str, enum.Enum):
    RESIDUAL = RESIDUAL
    MINRES = MINRES
    STAGNATION = STAGNATION
    MAX_ITER = "max-iter"
    BREAKDOWN = "breakdown"
    EXACT = "exact"


class StoreMissingError(RuntimeError):
    """Raised when a Ritz feature needs vectors the solve did not keep."""


@dataclass
class SolveConfig:
    """Tolerances and stopping rules.

    ``criteria`` holds any of ``"residual-ratio"``, ``"minres-style"`` and
    ``"stagnation"``; a solve stops as soon as one enabled rule fires.
    ``abs_floor`` stops on ``||r||_{M^-1} < abs_floor`` whatever the rules.
    """

    eps: float = 1e-8
    max_iter: int = 1000
    criteria: tuple = (RESIDUAL,)
    stagnation_window: int = 3
    abs_floor: float = 0.0

    def __post_init__(self):
        self.criteria = tuple(self.criteria)
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.criteria:
            raise ValueError("at least one stopping criterion is required")
        unknown = set(self.criteria) - set(CRITERIA)
        if unknown:
            raise ValueError(f"unknown criteria {sorted(unknown)}")
        if self.stagnation_window < 1:
            raise ValueError("stagnation_window must be positive")
        if self.abs_floor < 0:
            raise ValueError("abs_floor must be non-negative")


@dataclass
class IterationRecord:
    alpha: float
    beta: float
    gamma: float          # gamma_i = z_i^T r_i
    delta: float          # delta_i = w_i^T A w_i
    gamma_next: float     # gamma_{i+1}
    corr_mnorm_sq: float  # ||x_{i+1} - x_0||_M^2
    t_frob_sq: float      # ||T_{i+1}||_F^2
    energy_decrement: float  # gamma_i^2 / delta_i

    CSV_FIELDS = ("iter", "alpha", "beta", "gamma", "delta", "corr_mnorm_sq",
                  "t_frob_sq", "energy_decrement")


@dataclass
class SolveTrace:
    x0: np.ndarray
    r0: np.ndarray
    records: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    z_store: list | None = None
    q_store: list | None = None
    r_store: list | None = None
    stop_reason: StopReason | None = None
    breakdown: bool = False

    @property
    def m(self) -> int:
        return len(self.records)

    @property
    def alphas(self):
        return np.array([r.alpha for r in self.records])

    @property
    def betas(self):
        return np.array([r.beta for r in self.records])

    @property
    def deltas(self):
        return np.array([r.delta for r in self.records])

    def require_z(self):
        if self.z_store is None:
            raise StoreMissingError("the solve did not keep z vectors (use store=True)")
        return np.column_stack(self.z_store[: self.m])

    def require_q(self):
        if self.q_store is None:
            raise StoreMissingError("the solve did not keep q vectors (use store=True)")
        return np.column_stack(self.q_store[: self.m])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# " + ",".join(IterationRecord.CSV_FIELDS) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            for i, rec in enumerate(self.records):
                w.writerow([i] + [f"{getattr(rec, k):.17g}" for k in IterationRecord.CSV_FIELDS[1:]])


@dataclass
class SolveResult:
    x: np.ndarray
    trace: SolveTrace

    @property
    def iterations(self) -> int:
        return self.trace.m

    @property
    def converged(self) -> bool:
        return self.trace.stop_reason not in (StopReason.MAX_ITER, StopReason.BREAKDOWN)


def stopping_check(trace: SolveTrace, cfg: SolveConfig):
    """Return the first criterion met after the last record, else ``None``.

    The tests use only recorded scalars: (a) ``sqrt(gamma_i) < eps sqrt(gamma_0)``
    or below ``abs_floor``; (b) ``sqrt(gamma_i) < eps ||T_i||_F ||x_i - x_0||_M``;
    (c) energy decrement ``gamma^2/delta < eps^2`` over ``stagnation_window``
    consecutive iterations.
    """
    if not trace.records:
        raise ValueError("stopping_check needs at least one record")
    last = trace.records[-1]
    g = max(last.gamma_next, 0.0)
    if g == 0.0:
        return StopReason.EXACT
    res = math.sqrt(g)
    if RESIDUAL in cfg.criteria:
        if res < cfg.eps * math.sqrt(trace.gammas[0]):
            return StopReason.RESIDUAL
    if res < cfg.abs_floor:
        return StopReason.RESIDUAL
    if MINRES in cfg.criteria:
        if res < cfg.eps * math.sqrt(last.t_frob_sq) * math.sqrt(max(last.corr_mnorm_sq, 0.0)):
            return StopReason.MINRES
    if STAGNATION in cfg.criteria and len(trace.records) >= cfg.stagnation_window:
        tail = trace.records[-cfg.stagnation_window:]
        if all(r.energy_decrement < cfg.eps ** 2 for r in tail):
            return StopReason.STAGNATION
    return None


def _null_project(v):
    return v


def pcg_solve(A, M_inv, b, x0=None, cfg: SolveConfig | None = None, projector=None,
              store=False, store_residuals=False, reorthogonalize=False, callback=None):
    """Solve ``A x = b`` by conjugate gradient preconditioned with ``M_inv``.

    ``projector``, when given, must expose ``project(v)`` (the A-orthogonal
    projector applied to preconditioned residuals) and ``project_transpose(r)``;
    the caller is responsible for ``x0`` making ``C^T r_0 = 0`` (see
    :func:`regcg.augmentation.augmented_init`).

    ``store`` keeps the ``z`` and ``q`` vectors needed for Ritz extraction.
    ``reorthogonalize`` M-orthogonalizes each new ``z`` against the stored
    ones (residuals are kept for that purpose). ``callback(i, x, r)`` is called
    with the initial state and after every iteration.
    """
    A = as_linear_map(A)
    M_inv = as_linear_map(M_inv)
    cfg = cfg or SolveConfig()
    b = np.asarray(b, dtype=float)
    n = A.dim
    if M_inv.dim != n or b.shape != (n,):
        raise DimensionError(f"A has dim {n}, M_inv {M_inv.dim}, b shape {b.shape}")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)
    if x.shape != (n,):
        raise DimensionError(f"x0 has shape {x.shape}, expected ({n},)")
    project = projector.project if projector is not None else _null_project

    r = b - A.apply(x)
    trace = SolveTrace(x0=x.copy(), r0=r.copy())
    keep_r = store_residuals or reorthogonalize
    if store:
        trace.z_store, trace.q_store = [], []
    if keep_r:
        trace.r_store = []
    z = project(M_inv.apply(r))
    gamma = float(z @ r)
    trace.gammas.append(gamma)
    if callback is not None:
        callback(0, x, r)
    if gamma <= 0.0:
        trace.stop_reason = StopReason.EXACT if gamma == 0.0 else StopReason.BREAKDOWN
        trace.breakdown = gamma < 0.0
        return SolveResult(x, trace)

    w = z.copy()
    w_mnorm_sq = gamma            # ||w_i||_M^2
    w_cross = 0.0                 # w_i^T M (x_i - x_0)
    corr = 0.0                    # ||x_i - x_0||_M^2
    t_frob_sq = 0.0
    prev_alpha = prev_beta = None
    eta_prev = 0.0
    z_hist, r_hist = [], []

    for i in range(cfg.max_iter):
        q = A.apply(w)
        delta = float(w @ q)
        if not delta > BREAKDOWN_TOL:
            log.warning("CG breakdown at iteration %d: delta=%g", i, delta)
            trace.stop_reason = StopReason.BREAKDOWN
            trace.breakdown = True
            break
        alpha = gamma / delta
        if store:
            trace.z_store.append(z)
            trace.q_store.append(q)
        if keep_r:
            trace.r_store.append(r)
        if reorthogonalize:
            z_hist.append(z)
            r_hist.append(r)

        x_next = x + alpha * w
        r_next = r - alpha * q
        if projector is not None and (i + 1) % REPROJECT_EVERY == 0:
            r_next = projector.project_transpose(r_next)
        z_next = project(M_inv.apply(r_next))
        if reorthogonalize:
            for zj, rj in zip(z_hist, r_hist):
                z_next = z_next - zj * ((rj @ z_next) / (zj @ rj))
        gamma_next = float(z_next @ r_next)
        beta = gamma_next / gamma

        # correction norm, using the pre-update w-quantities
        corr = corr + alpha * alpha * w_mnorm_sq + 2.0 * alpha * w_cross
        # Lanczos matrix entries of this step
        mu = 1.0 / alpha if prev_alpha is None else 1.0 / alpha + prev_beta / prev_alpha
        t_frob_sq = t_frob_sq + mu * mu + 2.0 * eta_prev * eta_prev
        eta = math.sqrt(max(beta, 0.0)) / alpha

        rec = IterationRecord(alpha=alpha, beta=beta, gamma=gamma, delta=delta,
                              gamma_next=gamma_next, corr_mnorm_sq=corr,
                              t_frob_sq=t_frob_sq, energy_decrement=gamma * gamma / delta)

        if gamma_next < 0.0:
            trace.records.append(rec)
            trace.gammas.append(gamma_next)
            x, r = x_next, r_next
            if -gamma_next <= ROUNDOFF_GAMMA * trace.gammas[0]:
                # sign flip of a vanishing residual: the Krylov space is exhausted
                trace.stop_reason = StopReason.EXACT
            else:
                # indefinite preconditioner action: keep x_{i+1} (delta was fine) but stop
                log.warning("CG breakdown at iteration %d: gamma=%g", i + 1, gamma_next)
                trace.stop_reason = StopReason.BREAKDOWN
                trace.breakdown = True
            if callback is not None:
                callback(i + 1, x, r)
            break

        w_cross = beta * (w_cross + alpha * w_mnorm_sq)
        w_mnorm_sq = gamma_next + beta * beta * w_mnorm_sq
        w = z_next + beta * w
        x, r, z, gamma = x_next, r_next, z_next, gamma_next
        prev_alpha, prev_beta, eta_prev = alpha, beta, eta

        trace.records.append(rec)
        trace.gammas.append(gamma)
        if callback is not None:
            callback(i + 1, x, r)
        reason = stopping_check(trace, cfg)
        if reason is not None:
            trace.stop_reason = reason
            break
    else:
        trace.stop_reason = StopReason.MAX_ITER

    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite iterate produced by CG")
    return SolveResult(x, trace)


def trace_norms(trace: SolveTrace):
    """Per-iteration diagnostics from the recorded scalars.

    Returns a dict of arrays indexed by iteration ``i = 0..m``:
    ``residual_sq`` (``||r_i||^2_{M^-1}``), ``corr_mnorm_sq``
    (``||x_i - x_0||_M^2``), ``t_frob_sq`` (``||T_i||_F^2``, zero for i=0)
    and ``energy_drop`` (cumulated ``gamma_j^2/delta_j`` for ``j < i``, i.e.
    ``||x_0 - x||_A^2 - ||x_i - x||_A^2``).
    """
    if not trace.gammas:
        raise ValueError("empty trace")
    recs = trace.records
    return {
        "residual_sq": np.array(trace.gammas[: len(recs) + 1]),
        "corr_mnorm_sq": np.concatenate([[0.0], [r.corr_mnorm_sq for r in recs]]),
        "t_frob_sq": np.concatenate([[0.0], [r.t_frob_sq for r in recs]]),
        "energy_drop": np.concatenate([[0.0], np.cumsum([r.energy_decrement for r in recs])]),
    }
