"""Dense reference routines used to certify approximation claims on small inputs."""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg as sla

from .block_core import BlockSparseMatrix, expand_index
from .errors import InvalidInputError, NumericalError, SizeLimitError

MAX_DENSE = 3000

__all__ = [
    "as_dense",
    "dense_schur",
    "approx_epsilon",
    "loewner_leq",
    "min_nonzero_eig",
    "condition_number",
    "dense_solve",
    "hermitian_eigvalsh",
    "MAX_DENSE",
]


def as_dense(M, limit=MAX_DENSE):
    if isinstance(M, BlockSparseMatrix):
        if M.n * M.r > limit:
            raise SizeLimitError(f"dense oracle limited to N <= {limit}")
        return M.to_dense()
    if hasattr(M, "toarray"):
        M = M.toarray()
    a = np.asarray(M, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError("expected a square matrix")
    if a.shape[0] > limit:
        raise SizeLimitError(f"dense oracle limited to N <= {limit}")
    return a


def _sym(a):
    return 0.5 * (a + a.conj().T)


def hermitian_eigvalsh(a):
    return np.linalg.eigvalsh(_sym(as_dense(a)))


def dense_schur(M, F, r=None):
    """Schur complement eliminating block indices ``F``.

    ``M`` may be a BlockSparseMatrix (its own r is used) or a dense array with
    an explicit ``r`` (default 1).  Returns a dense array over the complement,
    in increasing index order.
    """
    if isinstance(M, BlockSparseMatrix):
        r = M.r
    r = r or 1
    a = _sym(as_dense(M))
    n = a.shape[0] // r
    F = np.unique(np.asarray(F, dtype=np.int64))
    C = np.setdiff1d(np.arange(n), F)
    if len(F) == 0:
        return a
    fi, ci = expand_index(F, r), expand_index(C, r)
    mff = a[np.ix_(fi, fi)]
    w = np.linalg.eigvalsh(mff)
    if w[0] <= 1e-12 * max(np.abs(w).max(), np.abs(a).max(), 1e-300):
        raise NumericalError("singular pivot block in Schur complement")
    sol = sla.solve(mff, a[np.ix_(fi, ci)], assume_a="her")
    return _sym(a[np.ix_(ci, ci)] - a[np.ix_(ci, fi)] @ sol)


def approx_epsilon(A, B):
    """Smallest ε with exp(−ε)B ≼ A ≼ exp(ε)B for positive definite A, B."""
    a, b = _sym(as_dense(A)), _sym(as_dense(B))
    if a.shape != b.shape:
        raise InvalidInputError("shape mismatch")
    wb, vb = np.linalg.eigh(b)
    scale = max(np.abs(wb).max(), 1e-300)
    if wb[0] <= 1e-14 * scale:
        raise InvalidInputError("second argument is not positive definite")
    s = vb / np.sqrt(wb)
    lam = np.linalg.eigvalsh(_sym(s.conj().T @ a @ s))
    if lam[0] <= 0:
        raise InvalidInputError("first argument is not positive definite")
    return float(np.max(np.abs(np.log(lam))))


def approx_epsilon_psd(A, B, tol=1e-10):
    """Like :func:`approx_epsilon` for PSD A, B sharing a kernel; returns
    inf when A does not vanish on the kernel of B."""
    a, b = _sym(as_dense(A)), _sym(as_dense(B))
    if a.shape != b.shape:
        raise InvalidInputError("shape mismatch")
    wb, vb = np.linalg.eigh(b)
    scale = max(np.abs(wb).max(), 1e-300)
    rng_ = wb > tol * scale
    if not rng_.any():
        return 0.0 if np.abs(a).max(initial=0.0) <= tol * scale else math.inf
    ker = vb[:, ~rng_]
    if ker.shape[1] and np.linalg.norm(a @ ker, 2) > 1e-8 * max(np.abs(a).max(), 1e-300):
        return math.inf
    s = vb[:, rng_] / np.sqrt(wb[rng_])
    lam = np.linalg.eigvalsh(_sym(s.conj().T @ a @ s))
    if lam[0] <= 0:
        return math.inf
    eps = float(np.max(np.abs(np.log(lam))))
    return 0.0 if eps < 1e-12 else eps


def loewner_leq(A, B, tol=1e-9):
    """True iff A ≼ B up to ``tol`` times ‖B‖."""
    a, b = _sym(as_dense(A)), _sym(as_dense(B))
    nb = max(np.abs(np.linalg.eigvalsh(b)).max(initial=0.0), 1e-300)
    return bool(np.linalg.eigvalsh(b - a)[0] >= -tol * nb)


def min_nonzero_eig(M):
    w = hermitian_eigvalsh(M)
    top = np.abs(w).max(initial=0.0)
    if top == 0:
        raise InvalidInputError("zero matrix has no nonzero eigenvalue")
    pos = w[w > 1e-10 * top]
    return float(pos.min())


def condition_number(M):
    w = hermitian_eigvalsh(M)
    top = w.max()
    if top <= 0:
        raise InvalidInputError("zero matrix has no condition number")
    return float(top / w[w > 1e-10 * top].min())


def dense_solve(M, b):
    """Solve M x = b with a dense Cholesky factorization (block vectors kept)."""
    a = _sym(as_dense(M))
    b = np.asarray(b, dtype=complex)
    shape = b.shape
    rhs = b.reshape(a.shape[0], -1)
    try:
        fac = sla.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite") from exc
    return sla.cho_solve(fac, rhs, check_finite=False).reshape(shape)
