"""Sparsifiers for block product-demand cliques.

A clique with demand blocks d_1..d_s has off-diagonal blocks −d_i d_j* and
diagonal blocks I·‖d_i‖·Σ_{k≠i} ‖d_k‖.  It is sparsified by running the
scalar weighted expander on the norms and transplanting each scalar edge
weight h_ij onto the block −(h_ij / (‖d_i‖‖d_j‖)) d_i d_j*.
"""

from __future__ import annotations

import numpy as np

from .block_core import BlockSparseMatrix, block_op_norms, herm
from .errors import InvalidInputError
from .expanders import WeightedGraph, weighted_bipartite_expander, weighted_expander


def _norms(d):
    d = np.asarray(d, dtype=complex)
    if d.ndim != 3 or d.shape[1] != d.shape[2]:
        raise InvalidInputError("demand blocks must have shape (s, r, r)")
    return d, block_op_norms(d)


def product_block_laplacian(d) -> BlockSparseMatrix:
    d, w = _norms(d)
    s, r, _ = d.shape
    iu, ju = np.triu_indices(s, 1)
    off = -(d[iu] @ herm(d[ju]))
    diag = (w * (w.sum() - w))[:, None, None] * np.eye(r)
    idx = np.arange(s)
    return BlockSparseMatrix.from_coo(
        s, r, np.concatenate((iu, idx)), np.concatenate((ju, idx)),
        np.concatenate((off, diag)), mode="mirror_upper")


def bipartite_product_block_laplacian(d, F) -> BlockSparseMatrix:
    """Only pairs with one end in ``F`` (positions into ``d``) and the other
    outside carry demand."""
    d, w = _norms(d)
    s, r, _ = d.shape
    inF = np.zeros(s, dtype=bool)
    inF[np.asarray(F, dtype=np.int64)] = True
    a, b = np.meshgrid(np.flatnonzero(inF), np.flatnonzero(~inF), indexing="ij")
    a, b = a.ravel(), b.ravel()
    off = -(d[a] @ herm(d[b]))
    partner = np.where(inF, w[~inF].sum(), w[inF].sum())
    diag = (w * partner)[:, None, None] * np.eye(r)
    idx = np.arange(s)
    return BlockSparseMatrix.from_coo(
        s, r, np.concatenate((a, idx)), np.concatenate((b, idx)),
        np.concatenate((off, diag)), mode="mirror_upper")


def _transplant(d, w, labels, G: WeightedGraph, s):
    """Block Laplacian on s indices from scalar graph G on ``labels``."""
    r = d.shape[1]
    G = G.without_loops()
    a, b = labels[G.u], labels[G.v]
    h = G.w
    off = -(h / (w[a] * w[b]))[:, None, None] * (d[a] @ herm(d[b]))
    deg = np.bincount(a, weights=h, minlength=s) + np.bincount(b, weights=h, minlength=s)
    idx = np.arange(s)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    flip = a > b
    off[flip] = herm(off[flip])
    return BlockSparseMatrix.from_coo(
        s, r, np.concatenate((lo, idx)), np.concatenate((hi, idx)),
        np.concatenate((off, deg[:, None, None] * np.eye(r))), mode="mirror_upper")


def clique_sparsification(d, epsilon, rng=None, stats=None) -> BlockSparseMatrix:
    """Sparse approximation of :func:`product_block_laplacian` (zero blocks
    stay isolated)."""
    d, w = _norms(d)
    s = len(d)
    nz = np.flatnonzero(w > 0)
    if len(nz) < 2:
        return BlockSparseMatrix.zeros(s, d.shape[1])
    G = weighted_expander(w[nz], epsilon, seed=rng, stats=stats)
    return _transplant(d, w, nz, G, s)


def bipartite_clique_sparsification(d, F, epsilon, rng=None, stats=None) -> BlockSparseMatrix:
    d, w = _norms(d)
    s = len(d)
    inF = np.zeros(s, dtype=bool)
    inF[np.asarray(F, dtype=np.int64)] = True
    A = np.flatnonzero(inF & (w > 0))
    B = np.flatnonzero(~inF & (w > 0))
    if len(A) == 0 or len(B) == 0:
        return BlockSparseMatrix.zeros(s, d.shape[1])
    G = weighted_bipartite_expander(w[A], w[B], epsilon, seed=rng, stats=stats)
    return _transplant(d, w, np.concatenate((A, B)), G, s)


def k2_cover(G: WeightedGraph) -> WeightedGraph:
    """Replace vertex i by copies 2i, 2i+1 and each edge by the 2x2
    bipartite clique between the copies of its ends."""
    G = G.without_loops()
    us, vs = [], []
    for a in (0, 1):
        for b in (0, 1):
            us.append(2 * G.u + a)
            vs.append(2 * G.v + b)
    return WeightedGraph.from_edges(2 * G.n, np.concatenate(us), np.concatenate(vs),
                                    np.tile(G.w, 4))
