"""Command-line driver: ``regcg {solve,datacomp,opticalflow,sweep}``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
Every output goes under ``--out`` together with a ``run.json`` manifest.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import __version__
from .io import (PgmError, RunManifest, display_range, quantize, read_field_csv, read_pgm,
                 write_field_csv, write_pgm)
from .operators import (ConvergenceError, DenseMap, DimensionError, NotPositiveDefiniteError,
                        NotSymmetricError, identity_map)
from .pcg import CRITERIA, SolveConfig, StopReason
from .ritz import RitzSet, picard_table, ritz_lcurve, write_lcurve_csv, write_picard_csv
from .tikhonov import TikhonovSystem, lambda_sweep, solve_regularized, write_sweep_csv

log = logging.getLogger("regcg")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2
NUMERICAL_ERRORS = (np.linalg.LinAlgError, ConvergenceError, NotPositiveDefiniteError,
                    FloatingPointError)
INPUT_ERRORS = (OSError, PgmError, DimensionError, NotSymmetricError, ValueError)


class UsageError(Exception):
    pass


def _float_list(text):
    if text is None or text == "":
        return []
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _criteria(text):
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [n for n in names if n not in CRITERIA]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"criteria must be drawn from {', '.join(CRITERIA)}")
    return names


def _levels(text):
    if text == "auto":
        return text
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("levels must be 'auto' or a positive integer")
    if v < 1:
        raise argparse.ArgumentTypeError("levels must be at least 1")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("recycle fraction must lie in [0, 1]")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="regcg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"regcg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, eps, max_iter):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--eps", type=float, default=eps)
        sp.add_argument("--max-iter", type=int, default=max_iter)

    s = sub.add_parser("solve", help="regularized system read from CSV matrices")
    s.add_argument("--A", dest="A", required=True, help="CSV matrix A")
    s.add_argument("--M", dest="M", help="CSV regularizer M (default identity)")
    s.add_argument("--bA", required=True, help="CSV right-hand side b_A")
    s.add_argument("--bM", help="CSV right-hand side b_M (default zero)")
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--criteria", type=_criteria, default=("residual-ratio",))
    s.add_argument("--prec", choices=("M", "id"), default="M")
    common(s, 1e-8, 1000)

    d = sub.add_parser("datacomp", help="Cauchy data completion on a rectangle")
    d.add_argument("--nel", type=int, default=40)
    d.add_argument("--k", type=int, default=3)
    d.add_argument("--H", type=float, default=1.0)
    d.add_argument("--T", type=float, default=1.0)
    d.add_argument("--snr", type=float, default=10.0, help="SNR in dB; inf for exact data")
    d.add_argument("--lambda", dest="lam", type=float, default=1e-9)
    d.add_argument("--method", choices=("cg", "tsvd", "direct"), default="cg")
    d.add_argument("--prec", choices=("sd", "jacobi", "id"), default="sd")
    d.add_argument("--reg", choices=("sd", "id"), default="sd")
    d.add_argument("--eps-sigma", type=float, default=1e-6)
    d.add_argument("--seed", type=int, default=0)
    common(d, 1e-9, 200)

    o = sub.add_parser("opticalflow", help="Gauss-Newton optical flow between two PGM images")
    o.add_argument("--img1", required=True)
    o.add_argument("--img2", required=True)
    o.add_argument("--lambda", dest="lam", type=float, default=1000.0)
    o.add_argument("--lambdas", type=_float_list, default=[])
    o.add_argument("--levels", type=_levels, default="auto")
    o.add_argument("--recycle", type=_fraction, default=0.85)
    o.add_argument("--prec", choices=("dct", "jacobi"), default="dct")
    o.add_argument("--outer-cap", type=int, default=20)
    o.add_argument("--outer-tol", type=float, default=1e-3)
    o.add_argument("--post-outer", type=int, default=3,
                   help="outer iterations for the post-processed weights")
    common(o, 1e-5, 500)

    w = sub.add_parser("sweep", help="weights post-processed from a saved Ritz set")
    w.add_argument("--ritz", required=True, help="ritz.npz written by solve or datacomp")
    w.add_argument("--lambdas", type=_float_list, required=True)
    w.add_argument("--modes", type=int, help="number of Ritz modes to use (default all)")
    w.add_argument("--out", required=True)
    return p


_NOT_PARAMS = ("out", "verbose", "command", "seed")


def parse_cli(argv):
    """Parse ``argv`` into ``(manifest, namespace)``; usage errors exit with code 2."""
    from .steklov import RNG_NAME

    args = build_parser().parse_args(argv)
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_PARAMS}
    seed = getattr(args, "seed", None)
    rng = RNG_NAME if args.command == "datacomp" else None
    return RunManifest(args.command, params, seed, rng, __version__), args


def _write_vector(path, v):
    write_field_csv(path, np.asarray(v, dtype=float)[:, None])


def _write_ritz_outputs(out, ritz, lam):
    ritz.save(os.path.join(out, "ritz.npz"))
    write_lcurve_csv(os.path.join(out, "lcurve.csv"), ritz_lcurve(ritz, lam))
    write_picard_csv(os.path.join(out, "picard.csv"), picard_table(ritz, lam))


def cmd_solve(args):
    A = read_field_csv(args.A)
    n = A.shape[0]
    M = read_field_csv(args.M) if args.M else np.eye(n)
    bA = read_field_csv(args.bA).ravel()
    bM = read_field_csv(args.bM).ravel() if args.bM else None
    sys_ = TikhonovSystem(DenseMap(A), DenseMap(M), bA, bM, args.lam)
    if args.prec == "M":
        try:
            f = cho_factor(M, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("M is not positive definite; use --prec id", None) from exc
        M_inv = DenseMap(cho_solve(f, np.eye(n)))
    else:
        M_inv = identity_map(n)
    cfg = SolveConfig(eps=args.eps, max_iter=args.max_iter, criteria=args.criteria)
    sol = solve_regularized(sys_, M_inv, cfg, want_ritz=True, reorthogonalize=True,
                            check_M=args.prec == "M")
    _write_vector(os.path.join(args.out, "x.csv"), sol.x)
    sol.result.trace.write_csv(os.path.join(args.out, "trace.csv"))
    if sol.ritz is not None:
        _write_ritz_outputs(args.out, sol.ritz, args.lam)
    return _status(sol.result)


def _status(result):
    reason = result.trace.stop_reason
    if result.trace.breakdown or reason == StopReason.BREAKDOWN:
        log.error("CG breakdown after %d iterations", result.iterations)
        return EXIT_NUMERIC
    if reason == StopReason.MAX_ITER:
        log.error("no convergence within %d iterations", result.iterations)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_datacomp(args):
    from .steklov import CauchyCase, analytic_trace, run_comparison

    case = CauchyCase(H=args.H, T=args.T, k=args.k, n_el=args.nel, snr_db=args.snr, seed=args.seed)
    res = run_comparison(case, args.method, eps_sigma=args.eps_sigma, reg=args.reg, lam=args.lam,
                         prec=args.prec, eps=args.eps, max_iter=args.max_iter)
    ref = analytic_trace(case)
    write_field_csv(os.path.join(args.out, "solution.csv"),
                    np.column_stack([case.trace_y, res.u_R, ref]))
    if res.iterates:
        errs = [np.linalg.norm(x - ref) / np.linalg.norm(ref) for x in res.iterates]
        write_field_csv(os.path.join(args.out, "errors.csv"),
                        np.column_stack([np.arange(len(errs)), errs]))
        write_field_csv(os.path.join(args.out, "lcurve_euclid.csv"), res.lcurve_euclid)
        write_field_csv(os.path.join(args.out, "lcurve_natural.csv"), res.lcurve_natural)
        res.trace.write_csv(os.path.join(args.out, "trace.csv"))
    if res.ritz is not None:
        _write_ritz_outputs(args.out, res.ritz, args.lam)
    log.info("relative error %.4g", res.relative_error(ref))
    return EXIT_OK if res.trace is None else _status_trace(res.trace)


def _status_trace(trace):
    if trace.breakdown:
        log.error("CG breakdown")
        return EXIT_NUMERIC
    return EXIT_OK


def _write_flow(out, state):
    from .opticalflow import strain_xx

    os.makedirs(out, exist_ok=True)
    write_field_csv(os.path.join(out, "flow_x.csv"), state.u_x)
    write_field_csv(os.path.join(out, "flow_y.csv"), state.u_y)
    e = strain_xx(state.u_x)
    write_pgm(os.path.join(out, "strain_xx.pgm"), quantize(e, *display_range(e)))


def cmd_opticalflow(args):
    from .opticalflow import PyramidConfig, gn_step, pyramid_solve
    from .tikhonov import LambdaFamily, multi_lambda_outer

    I1, _ = read_pgm(args.img1)
    I2, _ = read_pgm(args.img2)
    if I1.shape != I2.shape:
        raise UsageError(f"image sizes differ: {I1.shape} vs {I2.shape}")
    pcfg = PyramidConfig(levels=None if args.levels == "auto" else args.levels,
                         outer_cap=args.outer_cap, outer_tol=args.outer_tol,
                         recycle=args.recycle, prec=args.prec)
    cfg = SolveConfig(eps=args.eps, max_iter=args.max_iter)
    res = pyramid_solve(I1, I2, args.lam, pcfg, cfg)
    _write_flow(args.out, res.state)
    iters = [i for lvl in res.iterations for i in lvl]
    write_field_csv(os.path.join(args.out, "iterations.csv"),
                    np.array([[k, n] for k, n in enumerate(iters)], dtype=float))
    # diagnostic solve at the final state with the kernel basis only, so that
    # the Ritz set is valid for every weight
    diag = gn_step(res.problem, res.state, args.lam, cfg, want_ritz=True)
    if diag.ritz is not None and diag.ritz.theta.size:
        write_lcurve_csv(os.path.join(args.out, "lcurve.csv"), ritz_lcurve(diag.ritz, args.lam))
        write_picard_csv(os.path.join(args.out, "picard.csv"), picard_table(diag.ritz, args.lam))
    others = [l for l in args.lambdas if l != args.lam]
    if others:
        fam = LambdaFamily(args.lam, others)
        outer = multi_lambda_outer(res.problem, fam, res.state, cfg,
                                   outer_iterations=args.post_outer)
        for lam in others:
            _write_flow(os.path.join(args.out, f"lambda_{lam:.6g}"), outer.states[lam])
        if outer.error is not None:
            raise outer.error
    return EXIT_OK


def cmd_sweep(args):
    ritz = RitzSet.load(args.ritz)
    x0 = ritz.x0 if ritz.x0 is not None else np.zeros(ritz.V.shape[0])
    if args.modes is not None and not 1 <= args.modes <= ritz.theta.size:
        raise UsageError(f"--modes must lie in 1..{ritz.theta.size}")
    pts = lambda_sweep(ritz, x0, args.lambdas, i=args.modes)
    write_sweep_csv(os.path.join(args.out, "sweep.csv"), pts)
    for p in pts:
        _write_vector(os.path.join(args.out, f"x_lambda_{p.lam:.6g}.csv"), p.x)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "datacomp": cmd_datacomp, "opticalflow": cmd_opticalflow,
            "sweep": cmd_sweep}


def main(argv=None):
    try:
        manifest, args = parse_cli(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        os.makedirs(args.out, exist_ok=True)
        with np.errstate(over="raise", invalid="raise"):
            code = COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(f"regcg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, *INPUT_ERRORS) as exc:
        print(f"regcg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest.record_outputs(args.out)
    manifest.write(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
