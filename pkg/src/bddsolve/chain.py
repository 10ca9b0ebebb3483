"""Schur complement chains, their application as an approximate inverse,
and wrappers for refinement and singular systems."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .block_core import BlockSparseMatrix, matvec, pad_identity
from .errors import DivergenceError, InvalidInputError, NumericalError
from .jacobi import JacobiOperator


@dataclass(eq=False)
class ChainLevel:
    """One elimination step.

    ``f_pos``/``c_pos`` are positions inside the previous level's index set;
    ``F``/``C`` are the matching global labels.  ``M_CF`` is the scalar CSR
    block M[C, F] of the previous level's matrix.
    """

    F: np.ndarray
    C: np.ndarray
    f_pos: np.ndarray
    c_pos: np.ndarray
    Z: JacobiOperator
    M_CF: sp.csr_matrix
    epsilon: float
    M: BlockSparseMatrix | None = None
    stats: dict = field(default_factory=dict)

    @property
    def M_FC(self):
        return self.M_CF.conj().T.tocsr()


@dataclass(eq=False)
class SchurComplementChain:
    n: int
    r: int
    levels: list
    terminal_labels: np.ndarray
    terminal_matrix: np.ndarray          # dense M^(d)
    terminal_factor: np.ndarray = None   # lower Cholesky factor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.terminal_factor is None:
            self.terminal_factor = terminal_cholesky(self.terminal_matrix)
        # one memory layout for built and loaded chains: triangular solves
        # round differently on C and Fortran order
        self.terminal_factor = np.ascontiguousarray(self.terminal_factor)
        self._mfc = [lvl.M_FC for lvl in self.levels]

    @property
    def depth(self):
        return len(self.levels)

    def __call__(self, b):
        return apply_chain(self, b)


def terminal_cholesky(a):
    a = np.asarray(a, dtype=complex)
    if a.size == 0:
        return a
    try:
        return sla.cholesky(0.5 * (a + a.conj().T), lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("terminal matrix is not positive definite") from exc


def _terminal_solve(chain, b):
    fac = chain.terminal_factor
    if fac.size == 0:
        return b
    flat = b.reshape(fac.shape[0], -1)
    y = sla.solve_triangular(fac, flat, lower=True, check_finite=False)
    x = sla.solve_triangular(fac, y, lower=True, trans="C", check_finite=False)
    return x.reshape(b.shape)


def apply_chain(chain: SchurComplementChain, b):
    """Forward elimination sweep, terminal solve, backward substitution."""
    b = np.asarray(b)
    if b.shape[0] != chain.n or b.shape[1] != chain.r:
        raise InvalidInputError("right-hand side does not match the chain")
    b = b.astype(complex)
    r = chain.r
    tail = b.shape[2:]
    cur = b
    saved = []
    for lvl in chain.levels:
        xf = lvl.Z.apply(cur[lvl.f_pos])
        bc = cur[lvl.c_pos] - (lvl.M_CF @ xf.reshape(len(lvl.f_pos) * r, -1)).reshape(
            (len(lvl.c_pos), r) + tail)
        saved.append(xf)
        cur = bc
    x = _terminal_solve(chain, cur)
    for lvl, mfc, xf in zip(reversed(chain.levels), reversed(chain._mfc), reversed(saved)):
        corr = (mfc @ x.reshape(len(lvl.c_pos) * r, -1)).reshape((len(lvl.f_pos), r) + tail)
        xf = xf - lvl.Z.apply(corr)
        full = np.empty((len(lvl.f_pos) + len(lvl.c_pos), r) + tail, dtype=complex)
        full[lvl.f_pos] = xf
        full[lvl.c_pos] = x
        x = full
    return x


def chain_error_bound(chain_or_eps) -> float:
    """Σ 2ε_i over the levels (accepts a chain or a sequence of ε_i)."""
    if isinstance(chain_or_eps, SchurComplementChain):
        eps = [lvl.epsilon for lvl in chain_or_eps.levels]
    else:
        eps = list(chain_or_eps)
    return float(sum(2.0 * e for e in eps))


# ---------------------------------------------------------------------------
# iterative refinement


@dataclass
class RefineResult:
    x: np.ndarray
    iterations: int
    history: list


def _as_operator(M):
    if isinstance(M, BlockSparseMatrix):
        return lambda v: matvec(M, v)
    if callable(M):
        return M
    A = M
    return lambda v: (A @ v.reshape(A.shape[0], -1)).reshape(v.shape)


def refine(solver, M, b, tol=1e-8, max_iters=100, method="richardson"):
    """Iterative refinement x ← x + W(b − Mx), or PCG with W as preconditioner.

    Raises :class:`DivergenceError` with the residual history when the
    tolerance is not met within ``max_iters`` sweeps.
    """
    op = _as_operator(M)
    b = np.asarray(b, dtype=complex)
    nb = np.linalg.norm(b)
    x = np.zeros_like(b)
    if nb == 0:
        return RefineResult(x, 0, [0.0])
    history = [1.0]
    res = b.copy()
    if method == "richardson":
        for it in range(1, max_iters + 1):
            x = x + solver(res)
            res = b - op(x)
            rel = float(np.linalg.norm(res) / nb)
            history.append(rel)
            if not np.isfinite(rel):
                break
            if rel <= tol:
                return RefineResult(x, it, history)
    elif method == "pcg":
        z = solver(res)
        p = z.copy()
        rz = np.vdot(res, z)
        for it in range(1, max_iters + 1):
            q = op(p)
            a = rz / np.vdot(p, q)
            x = x + a * p
            res = res - a * q
            rel = float(np.linalg.norm(res) / nb)
            history.append(rel)
            if not np.isfinite(rel):
                break
            if rel <= tol:
                # report the true residual
                history[-1] = float(np.linalg.norm(b - op(x)) / nb)
                if history[-1] <= tol:
                    return RefineResult(x, it, history)
            z = solver(res)
            rz_new = np.vdot(res, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
    else:
        raise InvalidInputError(f"unknown refinement method {method!r}")
    raise DivergenceError(
        f"refinement did not reach tol={tol} in {max_iters} iterations", history)


# ---------------------------------------------------------------------------
# singular systems


def solve_regularized(M: BlockSparseMatrix, b, epsilon, mu, builder):
    """Approximately solve a possibly singular system via a shifted solver.

    ``builder(M_shifted, epsilon)`` must return a callable applying an
    ε-approximate inverse of ``M + εμI``.
    """
    if not 0 < epsilon < 0.5:
        raise InvalidInputError("epsilon must lie in (0, 1/2)")
    b = np.asarray(b, dtype=complex)
    if not np.any(b):
        return np.zeros_like(b)
    solver = builder(pad_identity(M, epsilon * mu), epsilon)
    return solver(b)


def pseudo_apply(M, solver, b, epsilon, kappa, solver_delta=None):
    """Return M·Z·Z·Z·M·b, an approximation of M⁺b on the range of M.

    ``solver`` should be a (ε/(56κ³))-approximate inverse of M + εμI; when
    its quality ``solver_delta`` is known and too weak, a parameter error is
    raised.
    """
    if epsilon <= 0 or kappa < 1:
        raise InvalidInputError("need epsilon > 0 and kappa >= 1")
    budget = epsilon / (56.0 * kappa**3)
    if solver_delta is not None and solver_delta > budget:
        raise InvalidInputError(
            f"solver accuracy {solver_delta:g} exceeds the budget {budget:g}")
    op = _as_operator(M)
    y = op(np.asarray(b, dtype=complex))
    for _ in range(3):
        y = solver(y)
    return op(y)


def pseudo_delta(epsilon, kappa):
    """Solver accuracy needed by :func:`pseudo_apply`."""
    return epsilon / (56.0 * kappa**3)
