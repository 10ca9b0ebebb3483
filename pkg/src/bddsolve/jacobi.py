"""Jacobi splitting M_FF = X + L and the truncated Neumann-series operator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .block_core import BlockDiagonalMatrix, BlockSparseMatrix, batch_lambda_min
from .errors import InvalidInputError, NumericalError

BETA = 0.5


def jacobi_steps(epsilon: float) -> int:
    """Smallest odd k with k >= log2(3/ε)."""
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    k = max(math.ceil(math.log2(3.0 / epsilon) - 1e-12), 1)
    return k if k % 2 else k + 1


def series_delta(k: int, beta: float = BETA) -> float:
    """Relative overshoot of the k-step series, β^k(1+β)/(1−β^{k+1})."""
    return beta**k * (1 + beta) / (1 - beta ** (k + 1))


def split_alpha_bdd(M_FF: BlockSparseMatrix):
    """Return (X, L): L keeps the off-diagonal blocks and gets the row sums of
    their norms on its diagonal; X = M_FF − L is block diagonal."""
    eye = np.eye(M_FF.r)
    sums = M_FF.offdiag_row_sums
    X = BlockDiagonalMatrix(M_FF.diag_blocks() - sums[:, None, None] * eye)
    rows, cols, blocks = M_FF.offdiag_edges()
    idx = np.arange(M_FF.n)
    L = BlockSparseMatrix.from_coo(
        M_FF.n, M_FF.r,
        np.concatenate((idx, rows)), np.concatenate((idx, cols)),
        np.concatenate((sums[:, None, None] * eye, blocks)),
        mode="mirror_upper",
    )
    return X, L


@dataclass(frozen=True, eq=False)
class JacobiOperator:
    X: BlockDiagonalMatrix
    L: BlockSparseMatrix
    k: int
    epsilon: float

    def __post_init__(self):
        if self.k < 0:
            raise InvalidInputError("k must be nonnegative")
        lam = batch_lambda_min(self.X.blocks)
        if len(lam) and lam.min() <= 0:
            bad = int(np.argmin(lam))
            raise NumericalError(f"X is not positive definite at row {bad}")

    @property
    def n(self):
        return self.X.n

    @property
    def r(self):
        return self.X.r

    @cached_property
    def _xinv(self):
        return self.X.inverse_blocks

    @cached_property
    def _xinv_csr(self):
        n, r = self.n, self.r
        return sp.bsr_matrix((self._xinv, np.arange(n), np.arange(n + 1)),
                             shape=(n * r, n * r)).tocsr()

    def apply(self, b):
        """x_0 = X⁻¹b, x_i = X⁻¹(b − L x_{i−1}); returns x_k."""
        b = np.asarray(b)
        shape = b.shape
        flat = b.reshape(self.n * self.r, -1)
        xinv = self._xinv_csr
        x = xinv @ flat
        if self.L.nnz:
            Lc = self.L.csr
            for _ in range(self.k):
                x = xinv @ (flat - Lc @ x)
        return x.reshape(shape)

    def apply_sparse(self, B):
        """Z·B for a scipy sparse B with n·r rows (explicit polynomial)."""
        B = sp.csr_matrix(B)
        xinv = self._xinv_csr
        x = xinv @ B
        if self.L.nnz:
            Lc = self.L.csr
            for _ in range(self.k):
                x = xinv @ (B - Lc @ x)
        return sp.csr_matrix(x)

    def to_dense(self):
        eye = np.eye(self.n * self.r, dtype=complex)
        return self.apply(eye.reshape(self.n, self.r, -1)).reshape(self.n * self.r, -1)


def make_jacobi(M_FF: BlockSparseMatrix, epsilon: float, k: int | None = None) -> JacobiOperator:
    X, L = split_alpha_bdd(M_FF)
    return JacobiOperator(X, L, jacobi_steps(epsilon) if k is None else k, epsilon)
