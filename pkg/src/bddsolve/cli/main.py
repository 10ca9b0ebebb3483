"""Command-line interface.

Exit codes: 0 success, 1 other library error, 2 parse/input error,
3 precondition violated, 4 numerical failure, 5 size cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time

import numpy as np

from .. import __version__
from ..builder import BuilderParams, decompose, practical_params, recursive_construct, udu_solve
from ..chain import pseudo_apply, refine
from ..errors import BddError, InvalidInputError, ParseError, PreconditionError, SizeLimitError
from ..generators import connection_laplacian, generate
from ..oracle import MAX_DENSE, approx_epsilon_psd, hermitian_eigvalsh
from ..block_core import BlockSparseMatrix, is_bdd, pad_identity
from ..resparsify import sparsify as sparsify_matrix
from ..schur import approx_schur
from ..selection import bdd_subset, bdd_subset_low_degree
from . import formats


def _params(args, n=None) -> BuilderParams:
    p = practical_params(n) if args.profile == "practical" else BuilderParams()
    for name in ("k", "c", "seed"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(p, name, val)
    if getattr(args, "terminal", None) is not None:
        p.terminal_size = args.terminal
    if getattr(args, "K_cap", None) is not None:
        p.K_cap = args.K_cap
    return p


def _emit(stats, path=None, stream=None):
    text = formats.dumps_stats(stats)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text, file=stream or sys.stdout)


def _write_solution(x, out):
    if out:
        formats.write_vector(x, out)
    else:
        for z in np.asarray(x).ravel():
            print(f"{z.real:.17g} {z.imag:.17g}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    g = generate(args.kind, args.n, args.r, args.seed, args.noise, args.degree, args.weights)
    if args.as_matrix:
        M = connection_laplacian(g)
        if args.pad:
            M = pad_identity(M, args.pad)
        formats.write_matrix(M, args.output)
    else:
        formats.write_graph(g, args.output)
    if g.planted is not None:
        formats.write_planted(g, args.output + ".planted")
    _emit({"n": g.n, "r": g.r, "edges": g.m, "kind": args.kind}, stream=sys.stderr)


def _read_bdd(path) -> BlockSparseMatrix:
    M = formats.read_any_matrix(path)
    ok, slack = is_bdd(M, return_slack=True)
    if not ok:
        bad = int(np.argmin(slack))
        raise PreconditionError(f"matrix is not bDD (row {bad}, slack {slack[bad]:.3e})")
    return M


def cmd_build(args):
    M = _read_bdd(args.matrix)
    stats = {}
    t0 = time.perf_counter()
    chain = recursive_construct(M, _params(args, M.n), stats)
    stats["build_seconds"] = time.perf_counter() - t0
    formats.save_chain(chain, args.output)
    _emit({"depth": chain.depth, "terminal": int(len(chain.terminal_labels)),
           "build_seconds": stats["build_seconds"]}, args.stats)


def _dense_spectrum(M):
    if M.n * M.r > MAX_DENSE:
        raise SizeLimitError(
            f"dense spectrum needs n*r <= {MAX_DENSE}; pass --mu and --kappa explicitly")
    w = hermitian_eigvalsh(M)
    top = w.max()
    pos = w[w > 1e-10 * top]
    return float(pos.min()), float(top / pos.min())


def cmd_solve(args):
    M = _read_bdd(args.matrix)
    b = formats.read_vector(args.rhs, M.n, M.r)
    stats = {}
    t0 = time.perf_counter()
    if args.pseudo:
        mu, kappa = args.mu, args.kappa
        if mu is None or kappa is None:
            mu_d, kappa_d = _dense_spectrum(M)
            mu = mu if mu is not None else mu_d
            kappa = kappa if kappa is not None else kappa_d
        Ms = pad_identity(M, args.eps * mu)
        chain = formats.load_chain(args.chain) if args.chain else recursive_construct(
            Ms, _params(args, M.n))
        inner_tol = min(1e-12, 0.1 * args.eps / (56.0 * kappa**3))

        def solver(v):
            return refine(chain, Ms, v, inner_tol, args.max_iters, method=args.method).x

        x = pseudo_apply(M, solver, b, args.eps, kappa)
        stats.update(mode="pseudo", mu=mu, kappa=kappa, epsilon=args.eps)
    else:
        chain = formats.load_chain(args.chain) if args.chain else recursive_construct(
            M, _params(args, M.n))
        res = refine(chain, M, b, args.tol, args.max_iters, method=args.method)
        x = res.x
        stats.update(mode="solve", iterations=res.iterations, history=res.history)
    r = b - M.matvec(x)
    stats["relative_residual"] = float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300))
    stats["seconds"] = time.perf_counter() - t0
    _write_solution(x, args.output)
    _emit(stats, args.stats, sys.stdout if args.output else sys.stderr)


def cmd_factor(args):
    M = _read_bdd(args.matrix)
    p = _params(args, M.n)
    if args.profile == "strict":
        from ..builder import udu_eps

        p.eps_schedule = lambda i: udu_eps(i + 1)
        p.low_degree = True
    stats = {}
    f = decompose(M, p, stats)
    formats.save_udu(f, args.output)
    _emit({"levels": len(f.levels), "U_blocks": f.U_nnz_blocks(), "n": f.n}, args.stats)


def cmd_udu_solve(args):
    f = formats.load_udu(args.factor)
    M = formats.read_any_matrix(args.matrix)
    if M.n != f.n or M.r != f.r:
        raise InvalidInputError("factorization does not match the matrix")
    b = formats.read_vector(args.rhs, M.n, M.r)
    res = refine(lambda v: udu_solve(f, v), M, b, args.tol, args.max_iters, method=args.method)
    _write_solution(res.x, args.output)
    _emit({"iterations": res.iterations, "history": res.history}, args.stats,
          sys.stdout if args.output else sys.stderr)


def cmd_sparsify(args):
    M = formats.read_any_matrix(args.matrix)
    from ..builder import _factory

    p = BuilderParams(factory=args.factory, seed=args.seed)
    stats = {}
    out = sparsify_matrix(M, args.eps, args.K, _factory(p), seed=args.seed, stats=stats)
    formats.write_matrix(out, args.output)
    stats["blocks_in"] = int(M.nnz)
    stats["blocks_out"] = int(out.nnz)
    _emit(stats, args.stats)


def cmd_schur(args):
    M = formats.read_any_matrix(args.matrix)
    F = formats.read_index_list(args.subset)
    if len(F) and (F.min() < 0 or F.max() >= M.n):
        raise ParseError("subset index out of range")
    stats = {}
    out = approx_schur(M, F, args.alpha, args.eps, seed=args.seed, stats=stats)
    formats.write_matrix(out, args.output)
    C = np.setdiff1d(np.arange(M.n), F)
    stats["C"] = C.tolist() if len(C) <= 64 else f"{len(C)} indices (complement of F)"
    _emit(stats, args.stats)


def cmd_subset(args):
    M = formats.read_any_matrix(args.matrix)
    fn = bdd_subset_low_degree if args.low_degree else bdd_subset
    res = fn(M, args.alpha, seed=args.seed)
    lines = "\n".join(str(int(i)) for i in res.F)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(lines + "\n")
    else:
        print(lines)
    _emit({"size": int(len(res.F)), "iterations": res.iterations}, stream=sys.stderr)


def cmd_verify(args):
    A = formats.read_any_matrix(args.a)
    B = formats.read_any_matrix(args.b)
    if A.n != B.n or A.r != B.r:
        raise InvalidInputError("matrices have different shapes")
    if A.n * A.r > MAX_DENSE:
        raise SizeLimitError(f"verify is limited to n*r <= {MAX_DENSE}")
    print(approx_epsilon_psd(A, B))


def cmd_bench(args):
    sizes = [int(s) for s in args.sizes.split(",")]
    writer = csv.writer(sys.stdout if not args.output else open(args.output, "w", newline=""))
    writer.writerow(["n", "r", "build_seconds", "solve_seconds", "iterations", "depth",
                     "relative_residual"])
    for n in sizes:
        g = generate(args.kind, n, args.r, args.seed, degree=args.degree)
        M = pad_identity(connection_laplacian(g), args.pad)
        b = np.random.default_rng(args.seed).standard_normal((M.n, M.r)).astype(complex)
        t0 = time.perf_counter()
        chain = recursive_construct(M, _params(args, M.n))
        t1 = time.perf_counter()
        res = refine(chain, M, b, args.tol, args.max_iters, method=args.method)
        t2 = time.perf_counter()
        writer.writerow([M.n, M.r, f"{t1 - t0:.3f}", f"{t2 - t1:.3f}", res.iterations,
                         chain.depth, f"{res.history[-1]:.3e}"])


# ---------------------------------------------------------------------------
# parser


def _builder_opts(p):
    p.add_argument("--k", type=int, help="phase length between sparsifications")
    p.add_argument("--c", type=float, help="density exponent constant")
    p.add_argument("--K-cap", dest="K_cap", type=float, help="cap on the undersampling rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--terminal", type=int, help="terminal size")
    p.add_argument("--profile", choices=("practical", "strict"), default="practical",
                   help="parameter preset (default: practical)")


def _solve_opts(p):
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--method", choices=("pcg", "richardson"), default="pcg")
    p.add_argument("-o", "--output", help="solution file (default: stdout)")
    p.add_argument("--stats", help="write JSON stats here")


def build_parser():
    ap = argparse.ArgumentParser(prog="bddsolve", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-level progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a random connection graph")
    p.add_argument("kind", choices=("grid", "random-regular", "path-matching", "synchronization"))
    p.add_argument("n", type=int)
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--degree", type=int, default=4)
    p.add_argument("--weights", choices=("uniform", "random"), default="uniform")
    p.add_argument("--as-matrix", action="store_true", help="write the BDDM Laplacian")
    p.add_argument("--pad", type=float, default=0.0, help="identity shift (with --as-matrix)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build", help="build a Schur complement chain")
    p.add_argument("matrix")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--stats")
    _builder_opts(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("solve", help="solve M x = b")
    p.add_argument("matrix")
    p.add_argument("rhs")
    p.add_argument("--chain", help="prebuilt chain container")
    p.add_argument("--pseudo", action="store_true", help="apply the pseudoinverse")
    p.add_argument("--eps", type=float, default=0.1, help="pseudoinverse accuracy")
    p.add_argument("--mu", type=float, help="smallest nonzero eigenvalue (lower bound)")
    p.add_argument("--kappa", type=float, help="condition number on the range (upper bound)")
    _solve_opts(p)
    _builder_opts(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("factor", help="sparsified block Cholesky factorization")
    p.add_argument("matrix")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--stats")
    _builder_opts(p)
    p.set_defaults(func=cmd_factor)

    p = sub.add_parser("udu-solve", help="solve with a stored factorization")
    p.add_argument("factor")
    p.add_argument("matrix")
    p.add_argument("rhs")
    _solve_opts(p)
    p.set_defaults(func=cmd_udu_solve)

    p = sub.add_parser("sparsify", help="spectral sparsification by undersampling")
    p.add_argument("matrix")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--K", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--factory", choices=("exact", "pcg", "recursive"), default="exact")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--stats")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("schur", help="approximate Schur complement onto the complement of F")
    p.add_argument("matrix")
    p.add_argument("--subset", required=True, help="file listing F")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--stats")
    p.set_defaults(func=cmd_schur)

    p = sub.add_parser("subset", help="find an alpha-bDD subset")
    p.add_argument("matrix")
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--low-degree", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("verify", help="print the smallest eps with A ≈_eps B")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="CSV of build and solve times")
    p.add_argument("--sizes", default="500,1000,2000")
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--kind", default="random-regular")
    p.add_argument("--degree", type=int, default=4)
    p.add_argument("--pad", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--method", choices=("pcg", "richardson"), default="pcg")
    p.add_argument("-o", "--output")
    _builder_opts(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except BddError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ParseError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
