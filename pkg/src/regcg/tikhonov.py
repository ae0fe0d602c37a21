"""Regularized solves preconditioned by their own regularizer.

``(A + lam M) x = b_A + lam b_M`` is solved by CG preconditioned with
``M^-1``. The Ritz basis of that single solve diagonalizes ``A + lam' M``
for every ``lam'``, which gives cheap reconstructions for other weights.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .augmentation import RITZ, AugmentationBasis, augmented_init
from .operators import DimensionError, as_linear_map, shifted_map
from .pcg import SolveConfig, SolveResult, pcg_solve
from .ritz import RitzSet, corner_index, ritz_apply_A, ritz_vectors

log = logging.getLogger(__name__)

LIMIT_RTOL = 1e-14


@dataclass
class TikhonovSystem:
    A: object
    M: object
    b_A: np.ndarray
    b_M: np.ndarray | None = None
    lam: float = 0.0

    def __post_init__(self):
        self.A = as_linear_map(self.A)
        self.M = as_linear_map(self.M)
        self.b_A = np.asarray(self.b_A, dtype=float)
        self.b_M = np.zeros_like(self.b_A) if self.b_M is None else np.asarray(self.b_M, dtype=float)
        n = self.A.dim
        if self.M.dim != n or self.b_A.shape != (n,) or self.b_M.shape != (n,):
            raise DimensionError("A, M, b_A and b_M must share one dimension")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")

    @property
    def operator(self):
        return shifted_map(self.A, self.M, self.lam)

    @property
    def rhs(self):
        return self.b_A + self.lam * self.b_M

    def split_residual(self, x0):
        """``(b_A - A x0, b_M - M x0)``; their ``lam``-combination is the full residual."""
        return self.b_A - self.A.apply(x0), self.b_M - self.M.apply(x0)


@dataclass
class RegularizedSolve:
    result: SolveResult
    ritz: RitzSet | None = None
    AV: np.ndarray | None = None

    @property
    def x(self):
        return self.result.x


def solve_regularized(sys: TikhonovSystem, M_inv, cfg: SolveConfig | None = None,
                      basis: AugmentationBasis | None = None, want_ritz=False,
                      x00=None, reorthogonalize=False, check_M=True, callback=None):
    """Solve the regularized system with ``M_inv`` as preconditioner.

    With ``basis`` the solve is augmented: the initial guess is corrected in
    ``Range(C)`` and preconditioned residuals are projected. With
    ``want_ritz`` the Ritz set is returned with residual projections split
    into their ``A`` and ``M`` parts, along with ``A_lam V``.

    Recycled (non-kernel) columns in ``basis`` change the inner product the
    Lanczos vectors are orthonormal in; the Ritz check then falls back to the
    stored residuals and the set is only valid for ``sys.lam`` itself.
    """
    op = sys.operator
    n = op.dim
    x00 = np.zeros(n) if x00 is None else np.asarray(x00, dtype=float)
    if basis is not None and basis.size:
        x0, _ = augmented_init(x00, sys.rhs, basis, op)
        projector = basis
    else:
        x0, projector = x00, None
    recycled = basis is not None and RITZ in basis.labels
    res = pcg_solve(op, M_inv, sys.rhs, x0, cfg, projector=projector, store=want_ritz,
                    store_residuals=want_ritz and recycled,
                    reorthogonalize=reorthogonalize, callback=callback)
    if not want_ritz or res.trace.m == 0:
        return RegularizedSolve(res)
    rA0, rM0 = sys.split_residual(res.trace.x0)
    ritz = ritz_vectors(res.trace, lam=sys.lam, rA0=rA0, rM0=rM0,
                        M=sys.M if check_M and not recycled else None)
    AV = ritz_apply_A(res.trace, ritz.Xi)
    return RegularizedSolve(res, ritz, AV)


def _stable_terms(ritz, lam, i):
    """Mask of usable modes: ``theta_j + lam`` must stay above round-off of ``theta_1``."""
    m = ritz.theta.size if i is None else int(i)
    den = ritz.theta[:m] + lam
    scale = abs(ritz.theta[0] + lam) if ritz.theta.size else 1.0
    return np.abs(den) > LIMIT_RTOL * scale


@dataclass
class SweepPoint:
    lam: float
    x: np.ndarray
    mnorm_sq: float
    err_offset: float
    dropped: int = 0


def lambda_sweep(ritz: RitzSet, x0, lambdas, i=None, rA=None, rM=None):
    """Ritz reconstructions and L-curve coordinates for each weight in ``lambdas``.

    Modes with ``theta_j + lam`` below ``1e-14 |theta_1 + lam|`` are left out
    and counted in ``dropped``, which makes ``lam -> 0`` usable when ``A`` is
    singular.
    """
    rA = ritz.rA if rA is None else np.asarray(rA)
    rM = ritz.rM if rM is None else np.asarray(rM)
    x0 = np.asarray(x0, dtype=float)
    m = ritz.theta.size if i is None else int(i)
    out = []
    for lam in lambdas:
        lam = float(lam)
        if lam < 0:
            raise ValueError("weights must be non-negative")
        mask = _stable_terms(ritz, lam, m)
        c = (rA[:m] + lam * rM[:m])[mask]
        th = ritz.theta[:m][mask]
        y = c / (th + lam)
        x = x0 + ritz.V[:, :m][:, mask] @ y
        out.append(SweepPoint(lam, x, float(np.sum(y * y)),
                              float(np.sum(y * (th * y - 2.0 * rA[:m][mask]))),
                              int((~mask).sum())))
    return out


def write_sweep_csv(path, points):
    with open(path, "w", newline="") as fh:
        fh.write("# lambda,mnorm_sq,err_offset\n")
        w = csv.writer(fh, lineterminator="\n")
        for p in points:
            w.writerow([f"{p.lam:.17g}", f"{p.mnorm_sq:.17g}", f"{p.err_offset:.17g}"])


class NonlinearProblem(Protocol):
    """Outer-loop problem with a constant left-hand side.

    ``A`` and ``M`` (and ``M_inv``) must not change between outer
    iterations; ``rhs(state)`` returns ``(b_A, b_M)`` for the increment
    system and ``update(state, delta)`` returns the next state.
    """

    A: object
    M: object
    M_inv: object

    def rhs(self, state) -> tuple: ...

    def update(self, state, delta): ...

    def kernel_basis(self): ...


@dataclass
class LambdaFamily:
    """Solve weight ``lam0`` plus post-processed weights, each with its own state."""

    lam0: float
    others: list
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        self.others = [float(l) for l in self.others if float(l) != float(self.lam0)]
        if self.lam0 < 0 or any(l < 0 for l in self.others):
            raise ValueError("weights must be non-negative")

    @property
    def all(self):
        return [float(self.lam0)] + self.others


@dataclass
class OuterResult:
    states: dict
    iterations: list
    ritz_sizes: list
    completed: int
    error: Exception | None = None


def multi_lambda_outer(problem: NonlinearProblem, family: LambdaFamily, initial_state,
                       cfg: SolveConfig | None = None, outer_iterations=1,
                       truncation="corner", workers=None):
    """Outer loop where only the ``lam0`` increment is solved by CG.

    Other weights get their increment from the Ritz basis of that solve,
    using their own right-hand sides. ``truncation`` is ``"corner"`` (keep
    modes up to :func:`regcg.ritz.corner_index`) or ``"full"``.
    A failed ``lam0`` solve stops the loop and the partial states are
    returned with the exception.
    """
    if truncation not in ("corner", "full"):
        raise ValueError("truncation must be 'corner' or 'full'")
    lams = family.all
    states = {lam: family.states.get(lam, initial_state) for lam in lams}
    A = as_linear_map(problem.A)
    M = as_linear_map(problem.M)
    lam0 = float(family.lam0)
    op0 = shifted_map(A, M, lam0)
    kern = problem.kernel_basis()
    basis = AugmentationBasis.build(kern, A=op0) if kern is not None else None
    iters, sizes = [], []
    done = 0
    error = None
    for _ in range(outer_iterations):
        rhs = {lam: problem.rhs(states[lam]) for lam in lams}
        bA, bM = rhs[lam0]
        sys0 = TikhonovSystem(A, M, bA, bM, lam0)
        try:
            sol = solve_regularized(sys0, problem.M_inv, cfg, basis, want_ritz=True,
                                    reorthogonalize=True)
            if sol.result.trace.breakdown:
                raise FloatingPointError("CG breakdown in the lam0 solve")
        except Exception as exc:  # noqa: BLE001 - reported with partial results
            log.error("outer iteration %d aborted: %s", done, exc)
            error = exc
            break
        ritz = sol.ritz
        iters.append(sol.result.iterations)
        i = None
        if truncation == "corner" and ritz is not None and ritz.theta.size >= 2:
            i = corner_index(ritz, lam0)
        sizes.append(ritz.theta.size if ritz is not None else 0)

        def postprocess(lam):
            bA_p, bM_p = rhs[lam]
            sys_p = TikhonovSystem(A, M, bA_p, bM_p, lam)
            x0 = np.zeros(A.dim)
            if basis is not None:
                x0, _ = augmented_init(x0, sys_p.rhs, basis, sys_p.operator)
            if ritz is None:
                return x0
            rA0, rM0 = sys_p.split_residual(x0)
            pt = lambda_sweep(ritz, x0, [lam], i=i, rA=ritz.V.T @ rA0, rM=ritz.V.T @ rM0)[0]
            return pt.x

        new = {lam0: problem.update(states[lam0], sol.x)}
        if workers and len(family.others) > 1:
            with ThreadPoolExecutor(workers) as ex:
                deltas = dict(zip(family.others, ex.map(postprocess, family.others)))
        else:
            deltas = {lam: postprocess(lam) for lam in family.others}
        for lam, d in deltas.items():
            new[lam] = problem.update(states[lam], d)
        states = new
        done += 1
    return OuterResult(states, iters, sizes, done, error)


def default_keep(m: int) -> int:
    return math.ceil(0.85 * m)
