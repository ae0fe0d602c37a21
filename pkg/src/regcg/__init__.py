"""Conjugate gradient for Tikhonov-regularized systems, preconditioned by the regularizer."""

__version__ = "0.1.0"

from .operators import (ConvergenceError, DenseMap, DiagonalMap, DimensionError, LinearMap,
                        NotPositiveDefiniteError, NotSymmetricError, as_linear_map,
                        dense_sym_eig, generalized_eig, identity_map, shifted_map, tsvd_solve)
from .pcg import (MINRES, RESIDUAL, STAGNATION, SolveConfig, SolveResult, SolveTrace, StopReason,
                  pcg_solve, trace_norms)
from .ritz import (RitzSet, build_tridiagonal, corner_index, filtered_solution, picard_cutoff,
                   picard_table, ritz_apply_A, ritz_lcurve, ritz_vectors)
from .augmentation import AugmentationBasis, augmented_init, kernel_basis_check, recycle
from .tikhonov import (LambdaFamily, TikhonovSystem, lambda_sweep, multi_lambda_outer,
                       solve_regularized)

__all__ = [
    "AugmentationBasis", "ConvergenceError", "DenseMap", "DiagonalMap", "DimensionError",
    "LambdaFamily", "LinearMap", "MINRES", "NotPositiveDefiniteError", "NotSymmetricError",
    "RESIDUAL", "RitzSet", "STAGNATION", "SolveConfig", "SolveResult", "SolveTrace",
    "StopReason", "TikhonovSystem", "__version__", "as_linear_map", "augmented_init",
    "build_tridiagonal", "corner_index", "dense_sym_eig", "filtered_solution",
    "generalized_eig", "identity_map", "kernel_basis_check", "lambda_sweep",
    "multi_lambda_outer", "pcg_solve", "picard_cutoff", "picard_table", "recycle",
    "ritz_apply_A", "ritz_lcurve", "ritz_vectors", "shifted_map", "solve_regularized",
    "trace_norms", "tsvd_solve",
]
