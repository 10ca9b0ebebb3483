"""Density control by leverage-score estimation from a uniform undersample
and independent block-column resampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .block_core import BlockSparseMatrix, UnitaryTransferMatrix, add, factorize_bdd, herm
from .errors import InvalidInputError
from .rng import as_generator

C_S = 9.0
JL_CONST = 24.0


@dataclass(frozen=True)
class LeverageEstimates:
    tau: np.ndarray
    jl_rows: int
    seed: object


def jl_width(n, const=JL_CONST):
    return max(1, math.ceil(const * math.log(max(n, 2))))


def _chunk(m, r, s, budget=1 << 22):
    """Edge batch size keeping (batch, r, s) temporaries near ``budget`` entries."""
    return max(1, budget // max(1, r * s))


def _column_energy(B: UnitaryTransferMatrix, S):
    """‖B_e* S‖_F² for every block column e; S has shape (n, r, s)."""
    n, r, s = S.shape
    Bh = B.to_scipy().conj().T.tocsr()
    flat = S.reshape(n * r, s)
    out = np.empty(B.m)
    step = _chunk(B.m, r, s)
    for lo in range(0, B.m, step):
        hi = min(B.m, lo + step)
        left = Bh[lo * r:hi * r] @ flat
        sq = np.einsum("is,is->i", left.real, left.real) + np.einsum(
            "is,is->i", left.imag, left.imag)
        out[lo:hi] = sq.reshape(hi - lo, r).sum(axis=1)
    return out


def estimate_block_leverage(B: UnitaryTransferMatrix, X, W, jl_rows, seed=0,
                            C: UnitaryTransferMatrix | None = None) -> LeverageEstimates:
    """JL estimates of tr(B_e* (X + CC*)⁻¹ B_e) for every block column e.

    ``X`` is a BlockDiagonalMatrix, ``W`` a callable applying (an
    approximation of) (X + CC*)⁻¹ to arrays of shape (n, r, s).  The sketch
    is S = W (C G₁ᵀ + √X G₂ᵀ) with Gaussian G₁, G₂ of ``jl_rows`` rows, and
    τ̂_e = ‖B_e* S‖², capped at r.  Leverage with respect to the full
    matrix never exceeds r, so the cap keeps an estimate that over-covers
    the full-matrix leverage doing so.
    """
    if jl_rows < 1:
        raise InvalidInputError("jl_rows must be positive")
    n, r = B.n, B.r
    if B.m == 0:
        return LeverageEstimates(np.zeros(0), jl_rows, seed)
    rng = as_generator(seed)
    s = jl_rows
    Y = X.sqrt_blocks @ rng.standard_normal((n, r, s))
    Y = Y.astype(complex)
    if C is not None and C.m:
        Cs = C.to_scipy().tocsc()
        flat = Y.reshape(n * r, s)
        step = _chunk(C.m, r, s)
        for lo in range(0, C.m, step):
            hi = min(C.m, lo + step)
            flat += Cs[:, lo * r:hi * r] @ rng.standard_normal(((hi - lo) * r, s))
    S = W(Y / math.sqrt(s))
    return LeverageEstimates(np.minimum(_column_energy(B, S), float(r)), jl_rows, seed)


def sampling_probabilities(tau, epsilon, n, c_s=C_S):
    return np.minimum(1.0, c_s * np.asarray(tau) * math.log(max(n, 2)) / epsilon**2)


def sample_by_scores(B: UnitaryTransferMatrix, tau, epsilon, seed=0, c_s=C_S):
    """Keep column e with probability p_e, rescaled by 1/√p_e."""
    rng = as_generator(seed)
    p = sampling_probabilities(tau, epsilon, B.n, c_s)
    keep = rng.random(B.m) < p
    return B.subset(keep, 1.0 / np.sqrt(p[keep]))


def sparsify(M: BlockSparseMatrix, epsilon, K, factory, seed=0, c_s=C_S,
             jl_const=JL_CONST, jl_rows=None, stats=None) -> BlockSparseMatrix:
    """Return X + B̃B̃* approximating M = X + BB* within ε (w.h.p.).

    ``factory(M_sub)`` must return a callable applying an approximate inverse
    of ``M_sub`` (a BlockSparseMatrix) to arrays of shape (n, r, s).
    """
    if not 0 < epsilon:
        raise InvalidInputError("epsilon must be positive")
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    rng = as_generator(seed)
    X, B = factorize_bdd(M)
    m = B.m
    if m == 0:
        return X.to_sparse()
    # predicted sample size if every column kept its trivial bound r: skip
    # the estimation when it cannot drop anything
    if c_s * math.log(max(M.n, 2)) / epsilon**2 * _tau_floor(B, X) >= 1.0:
        if stats is not None:
            stats.update(skipped=True, m=m, kept=m)
        return M
    K = min(float(K), float(m))
    size = 0 if K >= m else int(m // K)
    idx = np.sort(rng.choice(m, size=size, replace=False)) if size else np.zeros(0, int)
    mask = np.zeros(m, dtype=bool)
    mask[idx] = True
    C = B.subset(mask)
    if C.m:
        Msub = add(X.to_sparse(), C.gram())
        W = factory(Msub)
    else:
        W = X.solve
    width = jl_rows or jl_width(M.n, jl_const)
    est = estimate_block_leverage(B, X, W, width, rng, C)
    Bt = sample_by_scores(B, est.tau, epsilon, rng, c_s)
    out = add(X.to_sparse(), Bt.gram())
    if stats is not None:
        stats.update(skipped=False, m=m, kept=Bt.m, tau_sum=float(est.tau.sum()),
                     K=K, undersample=int(C.m), jl_rows=width)
    return out


def _tau_floor(B, X):
    """Smallest leverage any column could have under the crude bound
    τ_e ≥ w_e·r/λ_max(M); returns a lower bound on min_e p_e·ε²/(c_s ln n)."""
    lam_max = 2.0 * np.max(np.linalg.eigvalsh(X.blocks)[:, -1] + 1e-300) + 2.0 * np.max(
        np.bincount(np.concatenate((B.u, B.v)), weights=np.concatenate((B.w, B.w)),
                    minlength=B.n))
    return float(B.w.min() * B.r / lam_max)
