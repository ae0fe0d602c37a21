"""Matrix-free Gauss-Newton optical flow with Laplacian regularization.

Flow fields are stored as one vector ``[u_x.ravel(), u_y.ravel()]``; images
use ``(row, col)`` indexing with ``x`` along columns and ``y`` along rows.
The regularizer is the negative 5-point Laplacian with reflecting borders,
so it is positive semi-definite with the per-component constants as kernel.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .augmentation import AugmentationBasis, recycle
from .operators import DiagonalMap, LinearMap
from .pcg import SolveConfig
from .tikhonov import TikhonovSystem, solve_regularized

log = logging.getLogger(__name__)

MIN_LEVEL_SIZE = 32
OUTER_CAP = 20
OUTER_TOL = 1e-3
INCREMENT_MEDIAN = 3


class DegenerateGradientError(ValueError):
    pass


def gradient(I):
    """``(J_x, J_y)``: central differences inside, one-sided at the borders."""
    I = np.asarray(I, dtype=float)
    return np.gradient(I, axis=1), np.gradient(I, axis=0)


def warp(I, u_x, u_y):
    """Bilinear samples of ``I`` at ``(x + u_x, y + u_y)``, clamped to the edge pixels."""
    I = np.asarray(I, dtype=float)
    rows, cols = np.indices(I.shape, dtype=float)
    return ndimage.map_coordinates(I, [rows + u_y, cols + u_x], order=1, mode="nearest")


def neg_laplacian(u):
    return -ndimage.laplace(u, mode="reflect")


def _split(v, shape):
    P = shape[0] * shape[1]
    return v[:P].reshape(shape), v[P:].reshape(shape)


def flow_operator(J_x, J_y) -> LinearMap:
    """``(du_x, du_y) -> (J_x s, J_y s)`` with ``s = J_x du_x + J_y du_y``."""
    jx, jy = J_x.ravel(), J_y.ravel()
    P = jx.size

    def apply(v):
        s = jx * v[:P] + jy * v[P:]
        return np.concatenate([jx * s, jy * s])

    return LinearMap(2 * P, apply)


def flow_regularizer(shape) -> LinearMap:
    """Block-diagonal negative Laplacian acting on both flow components."""
    def apply(v):
        a, b = _split(v, shape)
        return np.concatenate([neg_laplacian(a).ravel(), neg_laplacian(b).ravel()])

    return LinearMap(2 * shape[0] * shape[1], apply)


def regularizer_diagonal(shape):
    """Diagonal of the negative Laplacian: the number of in-domain neighbours."""
    d = np.full(shape, 4.0)
    d[0, :] -= 1
    d[-1, :] -= 1
    d[:, 0] -= 1
    d[:, -1] -= 1
    return d


@dataclass(frozen=True)
class DctPlan:
    shape: tuple
    eigenvalues: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, shape):
        rows, cols = (int(s) for s in shape)
        if rows < 2 or cols < 2:
            raise ValueError(f"field must be at least 2x2, got {shape}")
        ly = 2.0 * (1.0 - np.cos(np.pi * np.arange(rows) / rows))
        lx = 2.0 * (1.0 - np.cos(np.pi * np.arange(cols) / cols))
        return cls((rows, cols), ly[:, None] + lx[None, :])


def dct_laplacian_inverse(f, plan: DctPlan | None = None):
    """Zero-mean ``u`` with ``-Lap u = f - mean(f)`` under reflecting borders."""
    f = np.asarray(f, dtype=float)
    plan = plan or DctPlan.build(f.shape)
    if f.shape != plan.shape:
        raise ValueError(f"field shape {f.shape} does not match plan {plan.shape}")
    F = dctn(f, type=2, norm="ortho")
    lam = plan.eigenvalues.copy()
    lam[0, 0] = 1.0
    F /= lam
    F[0, 0] = 0.0
    return idctn(F, type=2, norm="ortho")


def dct_preconditioner(shape) -> LinearMap:
    """Pseudo-inverse of :func:`flow_regularizer`, one DCT solve per component."""
    plan = DctPlan.build(shape)

    def apply(v):
        a, b = _split(v, shape)
        return np.concatenate([dct_laplacian_inverse(a, plan).ravel(),
                               dct_laplacian_inverse(b, plan).ravel()])

    return LinearMap(2 * shape[0] * shape[1], apply)


def kernel_basis_c0(J_x, J_y, rtol=1e-12):
    """Two constant-per-component columns with ``C0^T A C0 = I``.

    The first column is constant in ``u_x``; the second is made A-orthogonal
    to it. Textureless images make the Gram matrix singular and raise
    :class:`DegenerateGradientError`.
    """
    jx, jy = np.ravel(J_x), np.ravel(J_y)
    P = jx.size
    sxx = float(jx @ jx)
    syy = float(jy @ jy)
    sxy = float(jx @ jy)
    if sxx <= 0.0:
        raise DegenerateGradientError(
            "image has no x-gradient; use the plain constant basis instead")
    schur = syy - sxy * sxy / sxx
    if schur <= rtol * max(syy, sxx):
        raise DegenerateGradientError(
            "image gradients are (nearly) collinear; use the plain constant basis instead")
    sb = 1.0 / math.sqrt(schur)
    one = np.ones(P)
    c1 = np.concatenate([one / math.sqrt(sxx), np.zeros(P)])
    c2 = np.concatenate([-sxy * sb / sxx * one, sb * one])
    return np.column_stack([c1, c2])


def constant_basis(shape):
    P = shape[0] * shape[1]
    C = np.zeros((2 * P, 2))
    C[:P, 0] = 1.0
    C[P:, 1] = 1.0
    return C


def median_filter(u, width=INCREMENT_MEDIAN):
    """Median over ``width x width`` windows with replicated edges."""
    width = int(width)
    if width < 1 or width % 2 == 0:
        raise ValueError(f"median width must be odd and positive, got {width}")
    u = np.asarray(u, dtype=float)
    if width == 1:
        return u.copy()
    return ndimage.median_filter(u, size=width, mode="nearest")


def strain_xx(u_x):
    return np.gradient(np.asarray(u_x, dtype=float), axis=1)


@dataclass
class FlowState:
    I1: np.ndarray
    I2: np.ndarray
    u_x: np.ndarray
    u_y: np.ndarray
    J_x: np.ndarray = None
    J_y: np.ndarray = None
    level: int = 0

    def __post_init__(self):
        self.I1 = np.asarray(self.I1, dtype=float)
        self.I2 = np.asarray(self.I2, dtype=float)
        if self.I1.shape != self.I2.shape or min(self.I1.shape) < 2:
            raise ValueError("images must share one shape of at least 2x2")
        if not (np.all(np.isfinite(self.I1)) and np.all(np.isfinite(self.I2))):
            raise ValueError("images must be finite")
        if self.J_x is None or self.J_y is None:
            self.J_x, self.J_y = gradient(self.I1)
        self.u_x = np.asarray(self.u_x, dtype=float)
        self.u_y = np.asarray(self.u_y, dtype=float)
        if self.u_x.shape != self.shape or self.u_y.shape != self.shape:
            raise ValueError("flow shape does not match the images")

    @property
    def shape(self):
        return self.I1.shape

    @property
    def u(self):
        return np.concatenate([self.u_x.ravel(), self.u_y.ravel()])

    def with_flow(self, u_x, u_y):
        return FlowState(self.I1, self.I2, u_x, u_y, self.J_x, self.J_y, self.level)


class FlowProblem:
    """Gauss-Newton increment systems for one pyramid level.

    The left-hand side only depends on the gradient of ``I1``, so it stays
    fixed across outer iterations and Ritz vectors can be recycled.
    """

    def __init__(self, I1, I2, prec="dct", median_width=INCREMENT_MEDIAN):
        self.I1 = np.asarray(I1, dtype=float)
        self.I2 = np.asarray(I2, dtype=float)
        self.shape = self.I1.shape
        self.J_x, self.J_y = gradient(self.I1)
        self.A = flow_operator(self.J_x, self.J_y)
        self.M = flow_regularizer(self.shape)
        self.prec = prec
        self.median_width = median_width
        if prec == "dct":
            self.M_inv = dct_preconditioner(self.shape)
        elif prec != "jacobi":
            raise ValueError(f"unknown preconditioner {prec!r}")

    def preconditioner(self, lam):
        if self.prec == "dct":
            return self.M_inv
        d = np.concatenate([self.J_x.ravel() ** 2, self.J_y.ravel() ** 2])
        d += lam * np.tile(regularizer_diagonal(self.shape).ravel(), 2)
        return DiagonalMap(1.0 / np.maximum(d, 1e-300))

    def state(self, u_x=None, u_y=None, level=0):
        z = np.zeros(self.shape)
        return FlowState(self.I1, self.I2, z if u_x is None else u_x, z if u_y is None else u_y,
                         self.J_x, self.J_y, level)

    def rhs(self, state: FlowState):
        """``b_A = (I1 - I2 o phi) J`` and ``b_M = -M u``."""
        diff = self.I1 - warp(self.I2, state.u_x, state.u_y)
        bA = np.concatenate([(diff * self.J_x).ravel(), (diff * self.J_y).ravel()])
        return bA, -self.M.apply(state.u)

    def update(self, state: FlowState, delta):
        dx, dy = _split(np.asarray(delta), self.shape)
        dx = median_filter(dx, self.median_width)
        dy = median_filter(dy, self.median_width)
        return state.with_flow(state.u_x + dx, state.u_y + dy)

    def kernel_basis(self):
        try:
            return kernel_basis_c0(self.J_x, self.J_y)
        except DegenerateGradientError as exc:
            log.warning("%s", exc)
            return constant_basis(self.shape)

    def system(self, state, lam):
        bA, bM = self.rhs(state)
        return TikhonovSystem(self.A, self.M, bA, bM, lam)


@dataclass
class StepResult:
    du: np.ndarray
    iterations: int
    ritz: object = None
    AV: np.ndarray | None = None


def gn_step(problem: FlowProblem, state: FlowState, lam, cfg: SolveConfig | None = None,
            basis: AugmentationBasis | None = None, want_ritz=False) -> StepResult:
    """One Gauss-Newton increment, median filtered, with C0 augmentation by default."""
    sys = problem.system(state, lam)
    if basis is None:
        basis = AugmentationBasis.build(problem.kernel_basis(), A=sys.operator)
    sol = solve_regularized(sys, problem.preconditioner(lam), cfg, basis, want_ritz=want_ritz,
                            reorthogonalize=want_ritz)
    dx, dy = _split(sol.x, problem.shape)
    du = np.concatenate([median_filter(dx, problem.median_width).ravel(),
                         median_filter(dy, problem.median_width).ravel()])
    return StepResult(du, sol.result.iterations, sol.ritz, sol.AV)


def downsample(I):
    """2x2 box average; an odd trailing row or column is dropped."""
    I = np.asarray(I, dtype=float)
    r, c = (I.shape[0] // 2) * 2, (I.shape[1] // 2) * 2
    I = I[:r, :c]
    return 0.25 * (I[0::2, 0::2] + I[1::2, 0::2] + I[0::2, 1::2] + I[1::2, 1::2])


def prolong(u, shape):
    """Bilinear interpolation of a coarse field onto a grid twice as fine."""
    rows, cols = np.indices(shape, dtype=float)
    return ndimage.map_coordinates(np.asarray(u, dtype=float),
                                   [(rows + 0.5) / 2 - 0.5, (cols + 0.5) / 2 - 0.5],
                                   order=1, mode="nearest")


def auto_levels(shape, min_size=MIN_LEVEL_SIZE):
    """Number of pyramid levels whose smaller side is still at least ``min_size``."""
    n = min(shape)
    levels = 1
    while n // 2 >= min_size:
        n //= 2
        levels += 1
    return levels


@dataclass
class PyramidConfig:
    levels: int | None = None
    outer_cap: int = OUTER_CAP
    outer_tol: float = OUTER_TOL
    recycle: float = 0.0
    prec: str = "dct"
    median_width: int = INCREMENT_MEDIAN


@dataclass
class PyramidResult:
    state: FlowState
    problem: FlowProblem
    iterations: list
    outer: list
    basis_sizes: list
    last_ritz: object = None


def build_pyramid(I1, I2, levels):
    pyr = [(np.asarray(I1, dtype=float), np.asarray(I2, dtype=float))]
    for _ in range(levels - 1):
        a, b = pyr[-1]
        pyr.append((downsample(a), downsample(b)))
    return pyr[::-1]


def level_solve(problem: FlowProblem, state: FlowState, lam, cfg, pcfg: PyramidConfig,
                recycle_keep: float = 0.0):
    """Outer Gauss-Newton loop on one level.

    Stops when the RMS increment falls below ``outer_tol`` pixels, after
    ``outer_cap`` steps, or when the RMS increment grows (the fixed Jacobian
    makes the iteration diverge on aliased levels); a growing increment is
    discarded. With ``recycle_keep > 0`` the leading Ritz vectors of each
    solve are appended to the augmentation basis of the next.
    """
    basis = AugmentationBasis.build(problem.kernel_basis(), A=problem.system(state, lam).operator)
    iters, sizes = [], []
    ritz = None
    prev = math.inf
    for _ in range(pcfg.outer_cap):
        step = gn_step(problem, state, lam, cfg, basis, want_ritz=recycle_keep > 0)
        iters.append(step.iterations)
        sizes.append(basis.size)
        rms = float(np.sqrt(np.mean(step.du ** 2)))
        if rms > prev:
            log.info("increment grew from %.3g to %.3g px; stopping the outer loop", prev, rms)
            break
        prev = rms
        dx, dy = _split(step.du, problem.shape)
        state = state.with_flow(state.u_x + dx, state.u_y + dy)
        ritz = step.ritz
        if rms < pcfg.outer_tol:
            break
        if recycle_keep > 0 and ritz is not None and ritz.theta.size:
            keep = math.ceil(recycle_keep * ritz.theta.size)
            try:
                basis = recycle(basis, ritz, step.AV, keep=keep)
            except ValueError as exc:
                log.warning("recycling skipped: %s", exc)
    return state, iters, sizes, ritz


def pyramid_solve(I1, I2, lam, pcfg: PyramidConfig | None = None,
                  cfg: SolveConfig | None = None) -> PyramidResult:
    """Coarse-to-fine flow estimation; recycling is applied on the finest level only."""
    pcfg = pcfg or PyramidConfig()
    I1 = np.asarray(I1, dtype=float)
    I2 = np.asarray(I2, dtype=float)
    if I1.shape != I2.shape:
        raise ValueError("images must share one shape")
    avail = auto_levels(I1.shape, min_size=2)
    levels = auto_levels(I1.shape) if pcfg.levels is None else int(pcfg.levels)
    if levels < 1:
        raise ValueError("levels must be at least 1")
    if levels > avail:
        log.warning("image too small for %d levels, using %d", levels, avail)
        levels = avail
    cfg = cfg or SolveConfig(eps=1e-5, max_iter=500)
    pyr = build_pyramid(I1, I2, levels)
    u_x = u_y = None
    iters, outer, sizes = [], [], []
    ritz = None
    problem = None
    for lvl, (a, b) in enumerate(pyr):
        problem = FlowProblem(a, b, prec=pcfg.prec, median_width=pcfg.median_width)
        if u_x is not None:
            u_x = 2.0 * prolong(u_x, a.shape)
            u_y = 2.0 * prolong(u_y, a.shape)
        state = problem.state(u_x, u_y, level=levels - 1 - lvl)
        keep = pcfg.recycle if lvl == len(pyr) - 1 else 0.0
        state, it, sz, ritz = level_solve(problem, state, lam, cfg, pcfg, keep)
        iters.append(it)
        outer.append(len(it))
        sizes.append(sz)
        u_x, u_y = state.u_x, state.u_y
    return PyramidResult(state, problem, iters, outer, sizes, ritz)


def speckle_pair(shape=(128, 128), shift=(0.3, -0.2), n_blobs=None, sigma=2.0, seed=0,
                 gmax=255.0):
    """Two renderings of one Gaussian-blob pattern, the second moved by ``shift``.

    Blobs are evaluated analytically, so any subpixel motion is exact:
    ``I2(x + shift) = I1(x)``.
    """
    from .steklov import make_rng

    rows, cols = shape
    rng = make_rng(seed)
    pad = 4 * sigma + max(abs(shift[0]), abs(shift[1]))
    area = (rows + 2 * pad) * (cols + 2 * pad)
    n_blobs = int(area / (2.5 * sigma * sigma)) if n_blobs is None else int(n_blobs)
    cx = rng.uniform(-pad, cols + pad, n_blobs)
    cy = rng.uniform(-pad, rows + pad, n_blobs)
    amp = rng.uniform(0.3, 1.0, n_blobs)
    y = np.arange(rows, dtype=float)
    x = np.arange(cols, dtype=float)

    def render(dx, dy):
        ex = np.exp(-((x[None, :] - (cx[:, None] + dx)) ** 2) / (2 * sigma * sigma))
        ey = np.exp(-((y[None, :] - (cy[:, None] + dy)) ** 2) / (2 * sigma * sigma))
        return np.einsum("k,ki,kj->ij", amp, ey, ex)

    I1 = render(0.0, 0.0)
    I2 = render(shift[0], shift[1])
    scale = gmax / max(I1.max(), I2.max())
    return I1 * scale, I2 * scale
