"""Block-sparse Hermitian matrices, small-block linear algebra and bDD predicates.

A matrix with ``n`` block rows of ``r x r`` complex blocks is stored in
block-CSR form (``indptr``, ``indices``, ``data`` with ``data.shape ==
(nnz, r, r)``).  Both triangles are stored and the lower one is always the
exact conjugate transpose of the upper one.

Vectors are numpy arrays of shape ``(n, r)``; multivectors have shape
``(n, r, s)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError, NumericalError, PreconditionError

ZERO_BLOCK_RTOL = 1e-14
BDD_TOL = 1e-10

__all__ = [
    "BlockSparseMatrix",
    "BlockDiagonalMatrix",
    "UnitaryTransferMatrix",
    "block_op_norm",
    "block_op_norms",
    "is_bdd",
    "is_alpha_bdd",
    "bdd_slack",
    "unitary_split",
    "unitary_split_batch",
    "factorize_bdd",
    "matvec",
    "submatrix",
    "add",
    "scale",
    "pad_identity",
    "herm",
    "batch_inv_sqrt",
    "batch_sqrt",
    "batch_inv",
]


# ---------------------------------------------------------------------------
# small-block helpers


def herm(a):
    """Conjugate transpose of a block or a batch of blocks."""
    return np.conj(np.swapaxes(a, -1, -2))


def _check_finite(a, what="input"):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{what} contains non-finite entries")


def block_op_norms(blocks):
    """Largest singular value of every block in a ``(m, r, r)`` batch."""
    blocks = np.asarray(blocks)
    if blocks.ndim != 3:
        raise InvalidInputError("expected a (m, r, r) batch of blocks")
    m, r, _ = blocks.shape
    if m == 0:
        return np.zeros(0)
    if r == 1:
        return np.abs(blocks[:, 0, 0])
    if r == 2:
        # H = b*b = [[a, c], [c̄, d]]; λ_max = (a+d)/2 + sqrt(((a−d)/2)² + |c|²)
        # avoids the cancellation of the trace/determinant form near equal
        # singular values (unitary blocks)
        b0, b1 = blocks[:, :, 0], blocks[:, :, 1]
        a = np.einsum("ki,ki->k", b0.conj(), b0).real
        d = np.einsum("ki,ki->k", b1.conj(), b1).real
        c = np.einsum("ki,ki->k", b0.conj(), b1)
        half = 0.5 * (a - d)
        return np.sqrt(0.5 * (a + d) + np.sqrt(half * half + np.abs(c) ** 2))
    return np.linalg.norm(blocks, ord=2, axis=(1, 2))


def block_op_norm(b) -> float:
    """Largest singular value of a single block."""
    b = np.atleast_2d(np.asarray(b, dtype=complex))
    _check_finite(b, "block")
    if b.shape[0] != b.shape[1]:
        raise InvalidInputError("blocks must be square")
    gram = herm(b) @ b
    w = np.linalg.eigvalsh(0.5 * (gram + herm(gram)))
    return float(np.sqrt(max(w[-1], 0.0)))


def _herm_eigh(blocks):
    blocks = 0.5 * (blocks + herm(blocks))
    return np.linalg.eigh(blocks)


def batch_sqrt(blocks):
    w, v = _herm_eigh(blocks)
    w = np.sqrt(np.maximum(w, 0.0))
    return (v * w[:, None, :]) @ herm(v)


def batch_inv_sqrt(blocks):
    w, v = _herm_eigh(blocks)
    if np.any(w <= 0):
        bad = int(np.argmin(w.min(axis=1)))
        raise NumericalError(f"block {bad} is not positive definite")
    return (v * (1.0 / np.sqrt(w))[:, None, :]) @ herm(v)


def batch_inv(blocks):
    w, v = _herm_eigh(blocks)
    if np.any(w <= 0):
        bad = int(np.argmin(w.min(axis=1)))
        raise NumericalError(f"block {bad} is not positive definite")
    return (v * (1.0 / w)[:, None, :]) @ herm(v)


def batch_lambda_min(blocks):
    if len(blocks) == 0:
        return np.zeros(0)
    if blocks.shape[1] == 1:
        return blocks[:, 0, 0].real.copy()
    return np.linalg.eigvalsh(0.5 * (blocks + herm(blocks)))[:, 0]


# ---------------------------------------------------------------------------
# block-sparse Hermitian matrix


def _canonical_sum(n, rows, cols, blocks):
    """Sum duplicate (row, col) entries; returns sorted unique keys and sums."""
    keys = rows.astype(np.int64) * n + cols.astype(np.int64)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    blocks = blocks[order]
    if len(keys) == 0:
        return keys, blocks
    starts = np.flatnonzero(np.concatenate(([True], keys[1:] != keys[:-1])))
    sums = np.add.reduceat(blocks, starts, axis=0)
    return keys[starts], sums


@dataclass(frozen=True, eq=False)
class BlockSparseMatrix:
    n: int
    r: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    # -- construction ------------------------------------------------------

    @classmethod
    def from_coo(cls, n, r, rows, cols, blocks, mode="hermitian_part",
                 drop_rtol=ZERO_BLOCK_RTOL):
        """Assemble from block triplets, summing duplicates.

        ``mode="hermitian_part"`` stores (A + A*)/2 of the assembled matrix A.
        ``mode="mirror_upper"`` treats the input as one triangle (either one)
        and mirrors it; diagonal blocks are still symmetrized.
        """
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        blocks = np.asarray(blocks, dtype=complex).reshape(len(rows), r, r)
        if len(rows) != len(cols):
            raise InvalidInputError("rows and cols differ in length")
        if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n
                          or cols.max() >= n):
            raise InvalidInputError("block index out of range")
        _check_finite(blocks, "matrix blocks")
        lower = rows > cols
        cr = np.where(lower, cols, rows)
        cc = np.where(lower, rows, cols)
        cb = blocks.copy()
        cb[lower] = herm(blocks[lower])
        keys, sums = _canonical_sum(n, cr, cc, cb)
        ur = keys // n
        uc = keys % n
        diag = ur == uc
        sums[diag] = 0.5 * (sums[diag] + herm(sums[diag]))
        if mode == "hermitian_part":
            sums[~diag] *= 0.5
        elif mode != "mirror_upper":
            raise InvalidInputError(f"unknown assembly mode {mode!r}")
        return cls._from_upper(n, r, ur, uc, sums, drop_rtol)

    @classmethod
    def _from_upper(cls, n, r, ur, uc, ub, drop_rtol=ZERO_BLOCK_RTOL):
        """Build from canonical upper-triangle entries (ur <= uc, unique)."""
        if len(ub):
            norms = block_op_norms(ub)
            keep = norms > drop_rtol * norms.max()
            ur, uc, ub = ur[keep], uc[keep], ub[keep]
        off = ur != uc
        rows = np.concatenate((ur, uc[off]))
        cols = np.concatenate((uc, ur[off]))
        data = np.concatenate((ub, herm(ub[off])), axis=0)
        order = np.lexsort((cols, rows))
        rows, cols, data = rows[order], cols[order], data[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(n, r, indptr, cols.astype(np.int64), np.ascontiguousarray(data))

    @classmethod
    def from_dense(cls, a, r, mode="hermitian_part"):
        a = np.asarray(a, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] % r:
            raise InvalidInputError("dense matrix shape is not a multiple of r")
        n = a.shape[0] // r
        blocks = a.reshape(n, r, n, r).transpose(0, 2, 1, 3)
        nz = np.any(blocks != 0, axis=(2, 3))
        rows, cols = np.nonzero(nz)
        return cls.from_coo(n, r, rows, cols, blocks[rows, cols], mode=mode)

    @classmethod
    def from_scipy(cls, s, r, mode="hermitian_part"):
        s = sp.csr_matrix(s)
        if s.shape[0] != s.shape[1] or s.shape[0] % r:
            raise InvalidInputError("sparse matrix shape is not a multiple of r")
        n = s.shape[0] // r
        b = s.tobsr(blocksize=(r, r))
        rows = np.repeat(np.arange(n), np.diff(b.indptr))
        return cls.from_coo(n, r, rows, b.indices, b.data.astype(complex), mode=mode)

    @classmethod
    def zeros(cls, n, r):
        return cls(n, r, np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros((0, r, r), dtype=complex))

    @classmethod
    def identity(cls, n, r, scale=1.0):
        idx = np.arange(n)
        blocks = np.broadcast_to(scale * np.eye(r, dtype=complex), (n, r, r))
        return cls.from_coo(n, r, idx, idx, blocks)

    @classmethod
    def block_diagonal(cls, blocks):
        blocks = np.asarray(blocks, dtype=complex)
        n = blocks.shape[0]
        idx = np.arange(n)
        return cls.from_coo(n, blocks.shape[1], idx, idx, blocks)

    # -- structure -----------------------------------------------------------

    @property
    def nnz(self) -> int:
        return int(len(self.indices))

    @property
    def shape(self):
        return (self.n * self.r, self.n * self.r)

    @cached_property
    def row_ids(self):
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    @cached_property
    def is_diag_entry(self):
        return self.row_ids == self.indices

    @cached_property
    def block_norms(self):
        return block_op_norms(self.data)

    @cached_property
    def offdiag_row_sums(self):
        """Σ_{j≠i} ‖M[i,j]‖ for every block row i."""
        w = np.where(self.is_diag_entry, 0.0, self.block_norms)
        return np.bincount(self.row_ids, weights=w, minlength=self.n)

    @cached_property
    def degrees(self):
        """Number of off-diagonal blocks per block row."""
        return np.bincount(self.row_ids[~self.is_diag_entry], minlength=self.n)

    def diag_blocks(self):
        out = np.zeros((self.n, self.r, self.r), dtype=complex)
        mask = self.is_diag_entry
        out[self.row_ids[mask]] = self.data[mask]
        return out

    def upper_entries(self):
        """(rows, cols, blocks) of the stored upper triangle, diagonal included."""
        mask = self.row_ids <= self.indices
        return self.row_ids[mask], self.indices[mask], self.data[mask]

    def offdiag_edges(self):
        """(rows, cols, blocks) for i < j."""
        mask = self.row_ids < self.indices
        return self.row_ids[mask], self.indices[mask], self.data[mask]

    # -- conversions -------------------------------------------------------

    @cached_property
    def csr(self):
        nr = self.n * self.r
        return sp.bsr_matrix((self.data, self.indices, self.indptr),
                             shape=(nr, nr)).tocsr()

    def to_scipy(self):
        return self.csr

    def to_dense(self):
        out = np.zeros((self.n, self.r, self.n, self.r), dtype=complex)
        out[self.row_ids, :, self.indices, :] = self.data
        return out.reshape(self.n * self.r, self.n * self.r)

    # -- algebra -------------------------------------------------------------

    def matvec(self, x):
        return matvec(self, x)

    def principal(self, idx):
        """Principal block submatrix M[idx, idx] (idx order is kept)."""
        idx = np.asarray(idx, dtype=np.int64).ravel()
        pos = np.full(self.n, -1, dtype=np.int64)
        pos[idx] = np.arange(len(idx))
        starts = self.indptr[idx]
        counts = self.indptr[idx + 1] - starts
        total = int(counts.sum())
        if total == 0:
            return BlockSparseMatrix.zeros(len(idx), self.r)
        gather = np.repeat(starts - np.concatenate(([0], np.cumsum(counts)[:-1])),
                           counts) + np.arange(total)
        newrow = np.repeat(np.arange(len(idx)), counts)
        newcol = pos[self.indices[gather]]
        keep = newcol >= 0
        gather, newrow, newcol = gather[keep], newrow[keep], newcol[keep]
        order = np.lexsort((newcol, newrow))
        gather, newrow, newcol = gather[order], newrow[order], newcol[order]
        indptr = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(np.bincount(newrow, minlength=len(idx)), out=indptr[1:])
        return BlockSparseMatrix(len(idx), self.r, indptr, newcol,
                                 np.ascontiguousarray(self.data[gather]))

    def cross(self, rows, cols):
        """Rectangular block M[rows, cols] as a scipy CSR matrix."""
        return self.csr[expand_index(rows, self.r)][:, expand_index(cols, self.r)]

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __repr__(self):
        return f"BlockSparseMatrix(n={self.n}, r={self.r}, nnz_blocks={self.nnz})"


def expand_index(idx, r):
    """Scalar indices of the block indices ``idx``."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    return (idx[:, None] * r + np.arange(r)[None, :]).ravel()


# ---------------------------------------------------------------------------
# block-diagonal matrices


@dataclass(frozen=True, eq=False)
class BlockDiagonalMatrix:
    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=complex)
        if b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise InvalidInputError("block diagonal data must be (n, r, r)")
        object.__setattr__(self, "blocks", 0.5 * (b + herm(b)))

    @property
    def n(self):
        return self.blocks.shape[0]

    @property
    def r(self):
        return self.blocks.shape[1]

    def is_positive_definite(self):
        return bool(np.all(batch_lambda_min(self.blocks) > 0))

    @cached_property
    def inverse_blocks(self):
        return batch_inv(self.blocks)

    @cached_property
    def inv_sqrt_blocks(self):
        return batch_inv_sqrt(self.blocks)

    @cached_property
    def sqrt_blocks(self):
        return batch_sqrt(self.blocks)

    def apply(self, x):
        return _apply_blocks(self.blocks, x)

    def solve(self, x):
        return _apply_blocks(self.inverse_blocks, x)

    def to_sparse(self):
        return BlockSparseMatrix.block_diagonal(self.blocks)

    def to_scipy(self):
        n, r = self.n, self.r
        return sp.bsr_matrix((self.blocks, np.arange(n), np.arange(n + 1)),
                             shape=(n * r, n * r)).tocsr()

    def to_dense(self):
        return self.to_sparse().to_dense()


def _apply_blocks(blocks, x):
    x = np.asarray(x)
    if x.ndim == 2:
        return np.einsum("kij,kj->ki", blocks, x)
    return np.einsum("kij,kjs->kis", blocks, x)


# ---------------------------------------------------------------------------
# unitary edge-vertex transfer matrix


@dataclass(frozen=True, eq=False)
class UnitaryTransferMatrix:
    """Columns with block ``Qu`` at ``u`` and ``Qv`` at ``v``, Qu Qu* = w I."""

    n: int
    r: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    qu: np.ndarray
    qv: np.ndarray

    @property
    def m(self):
        return int(len(self.u))

    def check(self, tol=1e-10):
        if np.any(self.u == self.v):
            raise InvalidInputError("edge with u == v")
        if np.any(self.w < 0):
            raise InvalidInputError("negative edge weight")
        eye = np.eye(self.r)
        for q in (self.qu, self.qv):
            g = q @ herm(q) - self.w[:, None, None] * eye
            err = np.abs(g).max(axis=(1, 2)) if len(g) else np.zeros(0)
            if np.any(err > tol * np.maximum(self.w, 1.0)):
                raise InvalidInputError("edge blocks are not scaled unitaries")

    def to_scipy(self):
        """B as an (n r) x (m r) CSR matrix."""
        n, r, m = self.n, self.r, self.m
        a = np.arange(r)
        shape = (m, r, r)
        col = np.broadcast_to(np.arange(m)[:, None, None] * r + a[None, None, :], shape)
        rows = [np.broadcast_to(ends[:, None, None] * r + a[None, :, None], shape)
                for ends in (self.u, self.v)]
        return sp.csr_matrix(
            (np.concatenate((self.qu.ravel(), self.qv.ravel())),
             (np.concatenate([x.ravel() for x in rows]), np.concatenate((col.ravel(),) * 2))),
            shape=(n * r, m * r))

    def gram(self):
        """B B* as a BlockSparseMatrix (computed blockwise)."""
        n, r = self.n, self.r
        eye = np.eye(r)
        wI = self.w[:, None, None] * eye
        rows = np.concatenate((self.u, self.v, self.u))
        cols = np.concatenate((self.u, self.v, self.v))
        blocks = np.concatenate((wI, wI, self.qu @ herm(self.qv)))
        return BlockSparseMatrix.from_coo(n, r, rows, cols, blocks, mode="mirror_upper")

    def subset(self, mask, scale_factors=None):
        u, v, w = self.u[mask], self.v[mask], self.w[mask]
        qu, qv = self.qu[mask], self.qv[mask]
        if scale_factors is not None:
            s = np.asarray(scale_factors, dtype=float)
            qu = qu * s[:, None, None]
            qv = qv * s[:, None, None]
            w = w * s ** 2
        return UnitaryTransferMatrix(self.n, self.r, u, v, w, qu, qv)


# ---------------------------------------------------------------------------
# predicates


def bdd_slack(M: BlockSparseMatrix, alpha=0.0):
    """λ_min(M[i,i]) − (1+α)·Σ_{j≠i}‖M[i,j]‖ for every row."""
    lam = batch_lambda_min(M.diag_blocks())
    return lam - (1.0 + alpha) * M.offdiag_row_sums


def _bdd_ok(M, alpha):
    lam = batch_lambda_min(M.diag_blocks())
    sums = (1.0 + alpha) * M.offdiag_row_sums
    dnorm = np.zeros(M.n)
    mask = M.is_diag_entry
    dnorm[M.row_ids[mask]] = M.block_norms[mask]
    scale_ = np.maximum(dnorm, sums)
    return lam >= sums - BDD_TOL * scale_, lam - sums


def is_bdd(M: BlockSparseMatrix, return_slack=False):
    ok, slack = _bdd_ok(M, 0.0)
    result = bool(np.all(ok))
    return (result, slack) if return_slack else result


def is_alpha_bdd(M: BlockSparseMatrix, alpha: float) -> bool:
    if alpha < 0:
        raise InvalidInputError("alpha must be nonnegative")
    ok, _ = _bdd_ok(M, alpha)
    return bool(np.all(ok))


# ---------------------------------------------------------------------------
# structural factorizations


def unitary_split_batch(d):
    """Vectorized unitary split of a ``(m, r, r)`` batch of nonzero blocks."""
    d = np.asarray(d, dtype=complex)
    w = block_op_norms(d)
    if np.any(w == 0):
        raise InvalidInputError("cannot split a zero block")
    u, s, vh = np.linalg.svd(d / w[:, None, None])
    c = np.clip(s, -1.0, 1.0)
    sn = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    plus = c + 1j * sn
    q1 = (u * plus[:, None, :]) @ vh
    q2 = (u * np.conj(plus)[:, None, :]) @ vh
    return w, q1, q2


def unitary_split(d):
    """Return (w, Q1, Q2) with w = ‖d‖, Qk unitary and d = (w/2)(Q1 + Q2)."""
    d = np.atleast_2d(np.asarray(d, dtype=complex))
    _check_finite(d, "block")
    w, q1, q2 = unitary_split_batch(d[None])
    return float(w[0]), q1[0], q2[0]


def factorize_bdd(M: BlockSparseMatrix):
    """Split a bDD matrix as X + B B* with X block diagonal PSD."""
    ok, slack = is_bdd(M, return_slack=True)
    if not ok:
        bad = int(np.argmin(slack))
        raise PreconditionError(f"matrix is not bDD (row {bad}, slack {slack[bad]:.3e})")
    r = M.r
    eye = np.eye(r)
    x = M.diag_blocks() - M.offdiag_row_sums[:, None, None] * eye
    rows, cols, blocks = M.offdiag_edges()
    if len(rows) == 0:
        empty = np.zeros((0, r, r), dtype=complex)
        return BlockDiagonalMatrix(x), UnitaryTransferMatrix(
            M.n, r, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), empty, empty)
    w, q1, q2 = unitary_split_batch(blocks)
    # M_ij = (w/2)(Q1 + Q2); a column with (sqrt(w/2) I, sqrt(w/2) Q_k*) at (i, j)
    # contributes (w/2) Q_k to block (i, j) and (w/2) I to both diagonals.
    s = np.sqrt(w / 2.0)[:, None, None]
    qu = np.concatenate((s * eye, s * eye)).astype(complex)
    qv = np.concatenate((s * herm(q1), s * herm(q2)))
    u = np.concatenate((rows, rows))
    v = np.concatenate((cols, cols))
    B = UnitaryTransferMatrix(M.n, r, u, v, np.concatenate((w, w)) / 2.0, qu, qv)
    return BlockDiagonalMatrix(x), B


# ---------------------------------------------------------------------------
# plumbing


def matvec(M: BlockSparseMatrix, x):
    x = np.asarray(x)
    if x.shape[0] != M.n or x.shape[1] != M.r:
        raise InvalidInputError("vector shape does not match matrix")
    if x.ndim == 2:
        return (M.csr @ x.reshape(-1)).reshape(M.n, M.r)
    s = x.shape[2]
    return (M.csr @ x.reshape(M.n * M.r, s)).reshape(M.n, M.r, s)


def submatrix(M: BlockSparseMatrix, rows, cols=None):
    """Principal submatrix (``cols`` omitted or equal to ``rows``) or a
    rectangular CSR block otherwise."""
    if cols is None or np.array_equal(np.asarray(rows), np.asarray(cols)):
        return M.principal(rows)
    return M.cross(rows, cols)


def add(A: BlockSparseMatrix, B: BlockSparseMatrix, beta=1.0):
    if A.n != B.n or A.r != B.r:
        raise InvalidInputError("dimension mismatch")
    ra, ca, ba = A.upper_entries()
    rb, cb, bb = B.upper_entries()
    return BlockSparseMatrix.from_coo(
        A.n, A.r, np.concatenate((ra, rb)), np.concatenate((ca, cb)),
        np.concatenate((ba, beta * bb)), mode="mirror_upper")


def scale(M: BlockSparseMatrix, c: float):
    c = float(c)
    if c == 0.0:
        return BlockSparseMatrix.zeros(M.n, M.r)
    return BlockSparseMatrix(M.n, M.r, M.indptr, M.indices, M.data * c)


def pad_identity(M: BlockSparseMatrix, xi: float):
    return add(M, BlockSparseMatrix.identity(M.n, M.r, xi))
