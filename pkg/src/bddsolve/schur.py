"""Approximate Schur complements: the squaring step, the last step and the
driver that chains them.

Internally every clique family is represented by a tall sparse matrix G
whose block column j holds the demand blocks of one clique; the clique
family sums to −G G*.  :func:`neg_outer` evaluates that sum either exactly
(sparse product) or by sparsifying the large cliques through the
product-demand machinery of :mod:`bddsolve.clique`.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .block_core import (
    BlockSparseMatrix,
    batch_inv_sqrt,
    batch_lambda_min,
    expand_index,
    herm,
    is_alpha_bdd,
    is_bdd,
)
from .errors import InvalidInputError, PreconditionError
from .rng import as_generator

CLIQUE_EDGE_THRESHOLD = 4096
ALL_PARTS = frozenset({"FF", "FC", "CC"})


# ---------------------------------------------------------------------------
# helpers


def _bsr_diag(blocks):
    n, r, _ = blocks.shape
    return sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)),
                         shape=(n * r, n * r)).tocsr()


def measured_alpha(M: BlockSparseMatrix, F) -> float:
    """Largest α for which M[F, F] is α-bDD (inf when F has no inner edges)."""
    sub = M.principal(F)
    lam = batch_lambda_min(sub.diag_blocks())
    s = sub.offdiag_row_sums
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s > 0, lam / s, np.inf)
    return float(ratio.min() - 1.0) if len(ratio) else math.inf


def _scaled_base(M: BlockSparseMatrix, in_F, f_diag, fc_factor):
    """Copy of M with F-diagonal blocks replaced by ``f_diag``, F-F
    off-diagonals removed and F-C blocks scaled by ``fc_factor``."""
    rows, cols = M.row_ids, M.indices
    fr, fcol = in_F[rows], in_F[cols]
    factor = np.where(fr | fcol, fc_factor, 1.0)
    factor[fr & fcol] = 0.0
    data = M.data * factor[:, None, None]
    keep = factor != 0
    r_, c_, d_ = rows[keep], cols[keep], data[keep]
    fidx = np.flatnonzero(in_F)
    r_ = np.concatenate((r_, fidx))
    c_ = np.concatenate((c_, fidx))
    d_ = np.concatenate((d_, f_diag))
    nr = M.n * M.r
    return _blocks_to_csr(M.n, M.r, r_, c_, d_, nr)


def _blocks_to_csr(n, r, rows, cols, blocks, nr=None):
    nr = nr or n * r
    a = np.arange(r)
    shape = (len(rows), r, r)
    rr = np.broadcast_to(rows[:, None, None] * r + a[None, :, None], shape)
    cc = np.broadcast_to(cols[:, None, None] * r + a[None, None, :], shape)
    return sp.csr_matrix((np.asarray(blocks).ravel(), (rr.ravel(), cc.ravel())),
                         shape=(nr, nr))


def _clique_matrix(M: BlockSparseMatrix, F, pivots):
    """G = −(M with F-diagonal blocks removed)[:, F] · blockdiag(pivots)."""
    r = M.r
    Ff = expand_index(F, r)
    cols = M.csr[:, Ff]
    E = sp.csr_matrix(
        (np.ones(len(Ff)), (Ff, np.arange(len(Ff)))), shape=(M.n * r, len(Ff)))
    dblocks = M.diag_blocks()[F]
    G = -(cols - E @ _bsr_diag(dblocks)) @ _bsr_diag(pivots)
    G = sp.csr_matrix(G)
    G.eliminate_zeros()
    return G


def _estimated_sparsifier_edges(s, eps):
    """Rough edge count of an ε-sparsifier of a product-demand clique on s
    vertices (vertex split ~2s/ε², expander degree ~ε⁻²)."""
    return 2.0 * s / eps**4


def neg_outer(G, in_F, r, parts=ALL_PARTS, epsilon=0.5, clique_mode="auto",
              rng=None, threshold=CLIQUE_EDGE_THRESHOLD):
    """Return −G G* restricted to the requested part pairs.

    ``parts`` is a subset of {"FF", "FC", "CC"}; "FC" covers both off-diagonal
    quadrants.  With ``clique_mode="exact"`` the product is formed exactly;
    ``"auto"`` replaces a column's clique by a sparsifier when it has more
    than ``threshold`` edges and the sparsifier is predicted to be smaller;
    ``"sparsify"`` does so for every column with at least three support rows.
    """
    parts = frozenset(parts)
    if not parts <= ALL_PARTS:
        raise InvalidInputError(f"unknown parts {set(parts) - ALL_PARTS}")
    G = sp.csc_matrix(G)
    nr, mr = G.shape
    n = nr // r
    ncol = mr // r
    support = np.zeros(ncol, dtype=np.int64)
    if ncol:
        brow = G.indices // r
        bcol = np.repeat(np.arange(mr) // r, np.diff(G.indptr))
        key = np.unique(bcol * n + brow)
        support = np.bincount(key // n, minlength=ncol)
    if clique_mode == "exact":
        big = np.zeros(ncol, dtype=bool)
    elif clique_mode == "auto":
        edges = support * (support - 1) / 2
        big = (edges > threshold) & (
            _estimated_sparsifier_edges(support, epsilon) < edges)
    elif clique_mode == "sparsify":
        big = support >= 3
    else:
        raise InvalidInputError(f"unknown clique mode {clique_mode!r}")

    small_cols = expand_index(np.flatnonzero(~big), r)
    Gs = G[:, small_cols]
    P = -(Gs @ Gs.conj().T)
    P = _mask_parts(sp.coo_matrix(P), in_F, r, parts)
    if not big.any():
        return P
    rng = as_generator(rng)
    pieces = [P]
    for j in np.flatnonzero(big):
        pieces.append(_sparsified_column(G[:, j * r:(j + 1) * r], in_F, r, parts,
                                         epsilon, rng))
    return sp.csr_matrix(sum(pieces[1:], pieces[0]))


def _mask_parts(P, in_F, r, parts):
    if parts == ALL_PARTS:
        return P.tocsr()
    fr = in_F[P.row // r]
    fc = in_F[P.col // r]
    keep = np.zeros(len(P.data), dtype=bool)
    if "FF" in parts:
        keep |= fr & fc
    if "CC" in parts:
        keep |= ~fr & ~fc
    if "FC" in parts:
        keep |= fr ^ fc
    return sp.csr_matrix((P.data[keep], (P.row[keep], P.col[keep])), shape=P.shape)


def _sparsified_column(g, in_F, r, parts, epsilon, rng):
    """Clique decomposition of −g g* for one block column, with the
    product-demand pieces replaced by sparsifiers."""
    from .clique import bipartite_clique_sparsification, clique_sparsification

    g = sp.csr_matrix(g)
    nr = g.shape[0]
    n = nr // r
    rows = np.unique(g.nonzero()[0] // r)
    dense = g[expand_index(rows, r)].toarray().reshape(len(rows), r, r)
    beta = np.linalg.norm(dense, ord=2, axis=(1, 2)) if r > 1 else np.abs(dense[:, 0, 0])
    nz = beta > 0
    rows, dense, beta = rows[nz], dense[nz], beta[nz]
    isF = in_F[rows]
    sF, sC = beta[isF].sum(), beta[~isF].sum()
    eye = np.eye(r)
    out_r, out_c, out_b = [], [], []

    def add_piece(sub, labels):
        sr, sc, sb = sub.upper_entries()
        out_r.append(labels[sr])
        out_c.append(labels[sc])
        out_b.append(sb)

    partner = np.zeros(len(rows))
    self_term = np.zeros(len(rows), dtype=bool)
    if "FF" in parts:
        partner[isF] += sF - beta[isF]
        self_term |= isF
        if isF.sum() >= 2:
            add_piece(clique_sparsification(dense[isF], epsilon, rng), rows[isF])
    if "CC" in parts:
        partner[~isF] += sC - beta[~isF]
        self_term |= ~isF
        if (~isF).sum() >= 2:
            add_piece(clique_sparsification(dense[~isF], epsilon, rng), rows[~isF])
    if "FC" in parts and isF.any() and (~isF).any():
        partner[isF] += sC
        partner[~isF] += sF
        order = np.concatenate((np.flatnonzero(isF), np.flatnonzero(~isF)))
        bip = bipartite_clique_sparsification(
            dense[order], np.arange(isF.sum()), epsilon, rng)
        add_piece(bip, rows[order])
    corr = -(beta * partner)[:, None, None] * eye
    corr = corr - np.where(self_term[:, None, None], dense @ herm(dense), 0.0)
    out_r.append(rows)
    out_c.append(rows)
    out_b.append(corr)
    rr = np.concatenate(out_r)
    cc = np.concatenate(out_c)
    bb = np.concatenate(out_b)
    # expand upper-triangle blocks to both triangles
    off = rr != cc
    rr2 = np.concatenate((rr, cc[off]))
    cc2 = np.concatenate((cc, rr[off]))
    bb2 = np.concatenate((bb, herm(bb[off])))
    return _blocks_to_csr(n, r, rr2, cc2, bb2, nr)


def _to_block(P, r):
    return BlockSparseMatrix.from_scipy(P, r)


def _check_pre(M, F, alpha):
    if not is_bdd(M):
        raise PreconditionError("input matrix is not bDD")
    if alpha < 4:
        raise PreconditionError("alpha must be at least 4")
    if not is_alpha_bdd(M.principal(F), alpha):
        raise PreconditionError(f"M[F, F] is not {alpha}-bDD")


def _mask(n, F):
    F = np.unique(np.asarray(F, dtype=np.int64))
    in_F = np.zeros(n, dtype=bool)
    in_F[F] = True
    return F, in_F


# ---------------------------------------------------------------------------
# the three steps


def schur_square(M: BlockSparseMatrix, F, epsilon, seed=None, clique_mode="auto",
                 check=True) -> BlockSparseMatrix:
    """One squaring round.

    The returned matrix lives on the same index set, has the same Schur
    complement onto C = V∖F (exactly, before clique sparsification), and
    its F-block is far more diagonally dominant than M's.
    """
    F, in_F = _mask(M.n, F)
    if check:
        _check_pre(M, F, 4.0)
    if not 0 < epsilon:
        raise InvalidInputError("epsilon must be positive")
    D = M.diag_blocks()[F]
    G = _clique_matrix(M, F, batch_inv_sqrt(D))
    base = _scaled_base(M, in_F, 0.5 * D, 0.5)
    out = base + 0.5 * neg_outer(G, in_F, M.r, ALL_PARTS, epsilon, clique_mode, seed)
    return _to_block(out, M.r)


def last_step_inverse(alpha, m_ff):
    """(Z^(last))⁻¹ for a scalar 1x1 pivot with no inner edges (test aid)."""
    x = alpha / (alpha + 1) * m_ff
    d = m_ff / (alpha + 1)
    t = x - d
    z = 0.5 / x + 0.5 * t * t / x**3
    return 1.0 / z


def last_step(M: BlockSparseMatrix, F, alpha, epsilon, seed=None,
              clique_mode="auto", check=True) -> BlockSparseMatrix:
    """Eliminate F from a matrix whose F-block is α-bDD with α large.

    Returns a matrix over C = V∖F (sorted local order) approximating the
    Schur complement within ε + 2/α.
    """
    F, in_F = _mask(M.n, F)
    if check:
        _check_pre(M, F, alpha)
    r = M.r
    C = np.flatnonzero(~in_F)
    rng = as_generator(seed)
    D = M.diag_blocks()[F]
    X = (alpha / (alpha + 1.0)) * D
    G = _clique_matrix(M, F, batch_inv_sqrt(X))
    R = _scaled_base(M, in_F, 0.5 * X, 0.5 * (1.0 - 1.0 / alpha))
    R = sp.csr_matrix(R + 0.5 * neg_outer(G, in_F, r, {"FC", "CC"}, epsilon,
                                          clique_mode, rng))
    # R[F, F] is block diagonal; eliminate it exactly.
    Rb = BlockSparseMatrix.from_scipy(R, r)
    rff = Rb.diag_blocks()[F]
    Ff = expand_index(F, r)
    Rcols = Rb.csr[:, Ff]
    E = sp.csr_matrix((np.ones(len(Ff)), (Ff, np.arange(len(Ff)))), shape=(M.n * r, len(Ff)))
    G2 = sp.csr_matrix((Rcols - E @ _bsr_diag(rff)) @ _bsr_diag(batch_inv_sqrt(rff)))
    out = Rb.csr + neg_outer(G2, in_F, r, {"CC"}, epsilon, clique_mode, rng)
    Cf = expand_index(C, r)
    return _to_block(sp.csr_matrix(out)[Cf][:, Cf], r)


def last_step_direct(M: BlockSparseMatrix, F, alpha) -> BlockSparseMatrix:
    """M_CC − M_CF Z^(last) M_FC by explicit sparse products (reference)."""
    F, in_F = _mask(M.n, F)
    C = np.flatnonzero(~in_F)
    r = M.r
    D = M.diag_blocks()[F]
    X = (alpha / (alpha + 1.0)) * D
    Xinv = _bsr_diag(np.linalg.inv(X))
    Mff = M.principal(F).csr
    T = 2 * _bsr_diag(X) - Mff
    Mfc = M.cross(F, C)
    Y = Xinv @ Mfc
    ZM = 0.5 * Y + 0.5 * (Xinv @ (T @ (Xinv @ (T @ Y))))
    out = M.principal(C).csr - Mfc.conj().T @ ZM
    return _to_block(out, r)


def schur_rounds(epsilon, alpha=4.0):
    """⌈2 log₂ log_{α/2}(4/ε)⌉ clamped below at 1; 0 when α ≥ 4/ε."""
    if alpha >= 4.0 / epsilon:
        return 0
    inner = math.log(4.0 / epsilon) / math.log(alpha / 2.0)
    return max(1, math.ceil(2.0 * math.log2(inner) - 1e-12)) if inner > 1 else 1


def approx_schur(M: BlockSparseMatrix, F, alpha=4.0, epsilon=0.25, seed=None,
                 clique_mode="auto", rounds=None, early_stop=True, stats=None,
                 check=True) -> BlockSparseMatrix:
    """Approximate Sc(M, F) over C = V∖F (sorted local order).

    Runs squaring rounds with budget ε/(2d) each and finishes with the last
    step at α = 4/ε and budget ε/4.  With ``early_stop`` the squaring loop
    ends as soon as M[F, F] is already (4/ε)-bDD; the remaining rounds would
    only add fill.
    """
    F, in_F = _mask(M.n, F)
    if check:
        _check_pre(M, F, alpha)
    if not 0 < epsilon < 1:
        raise InvalidInputError("epsilon must lie in (0, 1)")
    rng = as_generator(seed)
    a_meas = measured_alpha(M, F)
    d = schur_rounds(epsilon, max(alpha, min(a_meas, 1e300))) if rounds is None else rounds
    target = 4.0 / epsilon
    cur = M
    done = 0
    for _ in range(d):
        if early_stop and measured_alpha(cur, F) >= target:
            break
        cur = schur_square(cur, F, epsilon / (2 * d), rng, clique_mode, check=False)
        done += 1
    out = last_step(cur, F, target, epsilon / 4.0, rng, clique_mode, check=False)
    if stats is not None:
        stats.update(rounds_planned=d, rounds_done=done,
                     alpha_final=measured_alpha(cur, F))
    return out
