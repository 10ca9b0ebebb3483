"""Top-level constructions: recursive Schur complement chains and the
sparsified block Cholesky (UDU) factorization."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .block_core import BlockDiagonalMatrix, BlockSparseMatrix, expand_index, herm, is_bdd
from .chain import ChainLevel, SchurComplementChain, apply_chain, terminal_cholesky
from .errors import BddError, InvalidInputError, NumericalError, PreconditionError
from .jacobi import JacobiOperator, make_jacobi
from .rng import child_seeds
from .schur import approx_schur
from .selection import bdd_subset, bdd_subset_low_degree

MAX_DEPTH = 64
log_ = logging.getLogger(__name__)


def recursive_eps(i):
    """Level accuracy 1/(i+8)²."""
    return (i + 8.0) ** -2


def udu_eps(i):
    """Level accuracy 1/(8(i+2)²) (i counted from 1)."""
    return 1.0 / (8.0 * (i + 2.0) ** 2)


@dataclass
class BuilderParams:
    k: int = 4
    c: float = 1.0
    K_cap: float = 32.0
    terminal_size: int = 1000
    alpha: float = 4.0
    seed: int = 0
    eps_schedule: object = recursive_eps
    sparsify: bool = True
    sparsify_eps: float | None = None      # None: use the level's ε
    density_trigger: float | None = None   # None: 64·log n
    c_s: float = 9.0
    jl_const: float = 24.0
    factory: str = "recursive"             # or "exact", "pcg"
    lazy_sparsify: bool = False            # only when nnz/row exceeds the trigger
    pcg_tol: float = 1e-3
    pcg_maxiter: int = 300
    clique_mode: str = "auto"
    low_degree: bool = False
    keep_matrices: bool = False
    max_depth: int = MAX_DEPTH
    check: bool = False

    def K(self, j):
        """K_j = min(2^{2ck·log²((j−1)k+1)}, K_cap), at least 2."""
        x = (j - 1) * self.k + 1
        expo = 2.0 * self.c * self.k * math.log2(x) ** 2 if x > 1 else 0.0
        return max(2.0, min(2.0 ** min(expo, 60.0), self.K_cap))


def practical_params(n=None, **overrides) -> BuilderParams:
    """Preset that keeps desk-scale builds fast.

    Sparsification runs only when the average row holds more than 12 blocks,
    at ε = 1 with oversampling 2, undersampling rate 2 and a block-Jacobi
    PCG inner solver.  The terminal grows to n/5 (at most 2000) on large
    inputs.
    """
    p = BuilderParams(k=1, K_cap=2.0, sparsify_eps=1.0, c_s=2.0, factory="pcg",
                      lazy_sparsify=True, density_trigger=12.0, jl_const=8.0)
    if n is not None:
        p.terminal_size = int(min(2000, max(1000, n // 5)))
    for key, val in overrides.items():
        if not hasattr(p, key):
            raise InvalidInputError(f"unknown builder parameter {key!r}")
        setattr(p, key, val)
    return p


def recursive_construct(M0: BlockSparseMatrix, params: BuilderParams | None = None,
                        stats: dict | None = None) -> SchurComplementChain:
    """Build a Schur complement chain for M0 by repeated α-bDD elimination."""
    params = params or BuilderParams()
    if params.check and not is_bdd(M0):
        raise PreconditionError("input matrix is not bDD")
    n0 = M0.n
    M = M0
    labels = np.arange(n0)
    levels = []
    log = []
    seeds = iter(child_seeds(params.seed, 4 * params.max_depth + 8))
    select = bdd_subset_low_degree if params.low_degree else bdd_subset
    trigger = params.density_trigger
    if trigger is None:
        trigger = 64.0 * math.log(max(n0, 2))
    i = 0
    j = 0
    while M.n > params.terminal_size:
        if i >= params.max_depth:
            raise NumericalError(
                f"depth guard exceeded ({params.max_depth} levels, {M.n} rows remain)")
        eps = params.eps_schedule(i)
        t0 = time.perf_counter()
        entry = {"level": i, "n": M.n, "nnz_blocks": M.nnz}
        if params.sparsify and i % params.k == 0:
            dense_enough = M.nnz / max(M.n, 1) > trigger or (i > 0 and not params.lazy_sparsify)
            if dense_enough:
                j += 1
                from .resparsify import sparsify

                sp_stats = {}
                M = sparsify(M, params.sparsify_eps or eps, params.K(j),
                             factory=_factory(params), seed=next(seeds),
                             c_s=params.c_s, jl_const=params.jl_const, stats=sp_stats)
                entry["sparsify"] = sp_stats
        try:
            sub = select(M, params.alpha, seed=next(seeds))
            F = sub.F
            in_F = np.zeros(M.n, dtype=bool)
            in_F[F] = True
            C = np.flatnonzero(~in_F)
            Z = make_jacobi(M.principal(F), eps)
            M_CF = M.cross(C, F)
            sch = {}
            M_next = approx_schur(M, F, params.alpha, eps, seed=next(seeds),
                                  clique_mode=params.clique_mode, stats=sch,
                                  check=params.check)
        except BddError as exc:
            raise type(exc)(f"level {i}: {exc}") from exc
        entry.update(F=len(F), rounds=sch.get("rounds_done"),
                     seconds=time.perf_counter() - t0, nnz_next=M_next.nnz)
        log.append(entry)
        log_.info("level %d: n=%d nnz/row=%.1f |F|=%d rounds=%s %.2fs %s", i, entry["n"],
                  entry["nnz_blocks"] / entry["n"], len(F), entry["rounds"],
                  entry["seconds"], entry.get("sparsify", ""))
        levels.append(ChainLevel(
            F=labels[F], C=labels[C], f_pos=F, c_pos=C, Z=Z, M_CF=M_CF,
            epsilon=eps, M=M if params.keep_matrices else None, stats=entry))
        labels = labels[C]
        M = M_next
        i += 1
    chain = SchurComplementChain(
        n=n0, r=M0.r, levels=levels, terminal_labels=labels,
        terminal_matrix=M.to_dense(),
        meta={"params": _params_meta(params), "log": log})
    if params.keep_matrices:
        chain.meta["terminal_sparse"] = M
    if stats is not None:
        stats["log"] = log
        stats["depth"] = len(levels)
    return chain


def _params_meta(p):
    return {k: v for k, v in p.__dict__.items() if isinstance(v, (int, float, str, bool))}


def exact_factory(M: BlockSparseMatrix):
    """Sparse direct solver for M (complex LU)."""
    from scipy.sparse.linalg import splu

    lu = splu(sp.csc_matrix(M.csr), permc_spec="COLAMD")
    nr = M.n * M.r

    def solve(b):
        b = np.asarray(b, dtype=complex)
        return lu.solve(b.reshape(nr, -1)).reshape(b.shape)

    return solve


def pcg_factory(M: BlockSparseMatrix, tol=1e-3, maxiter=300):
    """Block-Jacobi preconditioned CG, one independent run per column."""
    A = M.csr
    P = BlockDiagonalMatrix(M.diag_blocks())
    nr = M.n * M.r

    def solve(b):
        b = np.asarray(b, dtype=complex)
        B = b.reshape(nr, -1)
        x = np.zeros_like(B)
        res = B.copy()
        z = P.solve(res.reshape(M.n, M.r, -1)).reshape(nr, -1)
        d = z.copy()
        rz = np.einsum("is,is->s", res.conj(), z).real
        stop = tol * np.linalg.norm(B, axis=0)
        for _ in range(maxiter):
            active = np.linalg.norm(res, axis=0) > stop
            if not active.any():
                break
            Ad = A @ d
            den = np.einsum("is,is->s", d.conj(), Ad).real
            a = np.where(active & (den > 0), rz / np.where(den > 0, den, 1.0), 0.0)
            x += a * d
            res -= a * Ad
            z = P.solve(res.reshape(M.n, M.r, -1)).reshape(nr, -1)
            rz_new = np.einsum("is,is->s", res.conj(), z).real
            d = z + np.where(rz > 0, rz_new / np.where(rz > 0, rz, 1.0), 0.0) * d
            rz = rz_new
        return x.reshape(b.shape)

    return solve


def _factory(params: BuilderParams):
    if params.factory == "exact":
        return exact_factory
    if params.factory == "pcg":
        return lambda Msub: pcg_factory(Msub, params.pcg_tol, params.pcg_maxiter)
    if params.factory == "recursive":
        def build(Msub):
            sub = replace(params, seed=params.seed + 7919, sparsify=False)
            return recursive_construct(Msub, sub)
        return build
    raise InvalidInputError(f"unknown factory {params.factory!r}")


# ---------------------------------------------------------------------------
# UDU factorization


@dataclass(eq=False)
class UDULevel:
    f_pos: np.ndarray
    c_pos: np.ndarray
    F: np.ndarray
    C: np.ndarray
    X: BlockDiagonalMatrix
    U_FC: sp.csr_matrix      # Z · M[F, C] (scalar CSR)


@dataclass(eq=False)
class UDUFactorization:
    """M ≈ U* D U with D block diagonal and U unit upper triangular in the
    elimination order ``order`` (F_1, F_2, …, terminal)."""

    n: int
    r: int
    levels: list
    terminal_labels: np.ndarray
    terminal_D: np.ndarray        # (t, r, r) block pivots of the terminal LDL*
    terminal_U: np.ndarray        # dense block-unit upper factor of the terminal
    meta: dict = field(default_factory=dict)

    @property
    def order(self):
        parts = [lvl.F for lvl in self.levels] + [self.terminal_labels]
        return np.concatenate(parts) if parts else np.zeros(0, np.int64)

    def D_blocks(self):
        """Block pivots in elimination order."""
        parts = [lvl.X.blocks for lvl in self.levels] + [self.terminal_D]
        return np.concatenate(parts)

    def U_nnz_blocks(self):
        r = self.r
        total = self.n  # unit diagonal
        for lvl in self.levels:
            total += _count_blocks(lvl.U_FC, r)
        t = len(self.terminal_labels)
        if t:
            tb = self.terminal_U.reshape(t, r, t, r)
            nz = np.any(tb != 0, axis=(1, 3))
            total += int(np.triu(nz, 1).sum())
        return total

    def dense_U(self):
        """U as a dense matrix in elimination order (test support)."""
        n, r = self.n, self.r
        U = np.eye(n * r, dtype=complex)
        pos = np.zeros(n, dtype=np.int64)
        pos[self.order] = np.arange(n)
        for lvl in self.levels:
            rows = expand_index(pos[lvl.F], r)
            cols = expand_index(pos[lvl.C], r)
            U[np.ix_(rows, cols)] = lvl.U_FC.toarray()
        t = len(self.terminal_labels)
        if t:
            idx = expand_index(pos[self.terminal_labels], r)
            U[np.ix_(idx, idx)] = self.terminal_U
        return U

    def dense_D(self):
        blocks = self.D_blocks()
        return sla.block_diag(*blocks) if len(blocks) else np.zeros((0, 0))


def _count_blocks(A, r):
    A = sp.coo_matrix(A)
    if A.nnz == 0:
        return 0
    key = np.unique((A.row // r).astype(np.int64) * (A.shape[1] // r + 1) + A.col // r)
    return int(len(key))


def decompose(M0: BlockSparseMatrix, params: BuilderParams | None = None,
              stats: dict | None = None) -> UDUFactorization:
    """Sparsified block Cholesky: eliminate α-bDD subsets with Jacobi pivots
    and approximate Schur complements; the terminal block is factored exactly."""
    params = params or BuilderParams(eps_schedule=lambda i: udu_eps(i + 1), low_degree=True)
    chain = recursive_construct(M0, params, stats)
    levels = []
    for lvl in chain.levels:
        U_FC = lvl.Z.apply_sparse(lvl.M_FC)
        U_FC.eliminate_zeros()
        levels.append(UDULevel(lvl.f_pos, lvl.c_pos, lvl.F, lvl.C, lvl.Z.X, U_FC))
    r = M0.r
    t = len(chain.terminal_labels)
    if t:
        R = chain.terminal_factor.conj().T          # upper Cholesky factor, T = R* R
        Rb = R.reshape(t, r, t, r)
        delta = np.stack([Rb[i, :, i, :] for i in range(t)])
        dinv = np.linalg.inv(delta)
        Ub = np.einsum("iab,ibjc->iajc", dinv, Rb)
        for i in range(t):
            Ub[i, :, i, :] = np.eye(r)
        Uhat = np.triu(Ub.reshape(t * r, t * r))
        Dd = herm(delta) @ delta
    else:
        Uhat = np.zeros((0, 0), complex)
        Dd = np.zeros((0, r, r), complex)
    return UDUFactorization(M0.n, r, levels, chain.terminal_labels, Dd, Uhat,
                            meta=chain.meta)


def udu_solve(f: UDUFactorization, b):
    """x = U⁻¹ D⁻¹ U⁻* b by level-wise substitution."""
    b = np.asarray(b, dtype=complex)
    if b.shape[0] != f.n or b.shape[1] != f.r:
        raise InvalidInputError("right-hand side does not match the factorization")
    r = f.r
    tail = b.shape[2:]
    # forward: U* y = b  (block lower triangular)
    cur = b
    ys = []
    for lvl in f.levels:
        yF = cur[lvl.f_pos]
        nf, nc = len(lvl.f_pos), len(lvl.c_pos)
        upd = lvl.U_FC.conj().T @ yF.reshape(nf * r, -1)
        cur = cur[lvl.c_pos] - upd.reshape((nc, r) + tail)
        ys.append(yF)
    t = len(f.terminal_labels)
    flat = cur.reshape(t * r, -1)
    if t:
        y = sla.solve_triangular(f.terminal_U, flat, trans="C", lower=False,
                                 unit_diagonal=True, check_finite=False)
        dinv = np.linalg.inv(f.terminal_D)
        y = np.einsum("kab,kbs->kas", dinv, y.reshape(t, r, -1)).reshape(t * r, -1)
        x = sla.solve_triangular(f.terminal_U, y, lower=False, unit_diagonal=True,
                                 check_finite=False)
    else:
        x = flat
    x = x.reshape((t, r) + tail)
    for lvl, yF in zip(reversed(f.levels), reversed(ys)):
        zF = lvl.X.solve(yF)
        nf, nc = len(lvl.f_pos), len(lvl.c_pos)
        xF = zF - (lvl.U_FC @ x.reshape(nc * r, -1)).reshape((nf, r) + tail)
        full = np.empty((nf + nc, r) + tail, dtype=complex)
        full[lvl.f_pos] = xF
        full[lvl.c_pos] = x
        x = full
    return x
