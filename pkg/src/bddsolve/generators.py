"""Instance generators: connection graphs with unitary edge blocks and random
bDD matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block_core import BlockSparseMatrix
from .errors import InvalidInputError
from .rng import as_generator


@dataclass(eq=False)
class ConnectionGraph:
    """Weighted graph with a unitary ``O[e]`` on every edge ``(u[e], v[e])``.

    ``planted`` optionally holds per-vertex unitaries U_i used to build a
    synchronization instance (O_uv ≈ U_u U_v*).
    """

    n: int
    r: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    O: np.ndarray
    planted: np.ndarray | None = None

    @property
    def m(self):
        return len(self.u)


def haar_unitaries(count, r, rng):
    z = rng.standard_normal((count, r, r)) + 1j * rng.standard_normal((count, r, r))
    q, rr = np.linalg.qr(z)
    d = np.diagonal(rr, axis1=1, axis2=2)
    ph = d / np.where(np.abs(d) == 0, 1, np.abs(d))
    return q * ph[:, None, :]


def connection_laplacian(g: ConnectionGraph) -> BlockSparseMatrix:
    """Diagonal I·Σ_j w_ij, off-diagonal (u, v) block −w·O_uv."""
    if np.any(g.w < 0):
        raise InvalidInputError("negative edge weight")
    if np.any(g.u == g.v):
        raise InvalidInputError("self-loop in connection graph")
    eye = np.eye(g.r)
    deg = np.bincount(g.u, weights=g.w, minlength=g.n) + np.bincount(
        g.v, weights=g.w, minlength=g.n)
    idx = np.arange(g.n)
    rows = np.concatenate((idx, g.u))
    cols = np.concatenate((idx, g.v))
    blocks = np.concatenate((deg[:, None, None] * eye, -g.w[:, None, None] * g.O))
    return BlockSparseMatrix.from_coo(g.n, g.r, rows, cols, blocks, mode="mirror_upper")


def _dedupe(u, v):
    a, b = np.minimum(u, v), np.maximum(u, v)
    keep = a != b
    a, b = a[keep], b[keep]
    key = np.unique(a.astype(np.int64) * (int(b.max(initial=0)) + 1) + b)
    base = int(b.max(initial=0)) + 1
    return key // base, key % base


def grid_edges(rows, cols):
    idx = np.arange(rows * cols).reshape(rows, cols)
    u = np.concatenate((idx[:, :-1].ravel(), idx[:-1, :].ravel()))
    v = np.concatenate((idx[:, 1:].ravel(), idx[1:, :].ravel()))
    return u, v


def random_regular_edges(n, d, rng):
    """Union of ⌈d/2⌉ random perfect matchings / permutation cycles, deduplicated."""
    us, vs = [], []
    for _ in range(max(1, d // 2)):
        perm = rng.permutation(n)
        us.append(perm)
        vs.append(np.roll(perm, 1))
    return _dedupe(np.concatenate(us), np.concatenate(vs))


def path_plus_matching_edges(n, rng):
    u = np.arange(n - 1)
    v = u + 1
    perm = rng.permutation(n)
    half = n // 2
    return _dedupe(np.concatenate((u, perm[:half])), np.concatenate((v, perm[half:2 * half])))


def generate(kind, n, r=1, seed=0, noise=0.0, degree=4, weights="uniform"):
    """Build a :class:`ConnectionGraph`.

    kinds: ``grid`` (n is rounded to a near-square grid), ``random-regular``
    (union of permutation cycles), ``path-matching`` and ``synchronization``
    (random-regular support with planted unitaries O_uv = U_u U_v*,
    perturbed by ``noise``).  Non-synchronization kinds use Haar random
    edge unitaries.
    """
    rng = as_generator(seed)
    if n < 1:
        raise InvalidInputError("n must be positive")
    if kind == "grid":
        rows = int(np.floor(np.sqrt(n)))
        cols = int(np.ceil(n / rows))
        u, v = grid_edges(rows, cols)
        n = rows * cols
    elif kind in ("random-regular", "synchronization"):
        u, v = random_regular_edges(n, degree, rng)
    elif kind == "path-matching":
        u, v = path_plus_matching_edges(n, rng)
    else:
        raise InvalidInputError(f"unknown generator kind {kind!r}")
    m = len(u)
    w = np.ones(m) if weights == "uniform" else rng.uniform(0.5, 2.0, m)
    planted = None
    if kind == "synchronization":
        planted = haar_unitaries(n, r, rng)
        O = planted[u] @ np.conj(np.swapaxes(planted[v], 1, 2))
        if noise > 0:
            pert = rng.standard_normal((m, r, r)) + 1j * rng.standard_normal((m, r, r))
            pert = 0.5 * (pert - np.conj(np.swapaxes(pert, 1, 2)))  # skew-Hermitian
            from scipy.linalg import expm

            O = np.stack([expm(noise * p) @ o for p, o in zip(pert, O)])
    elif r == 1:
        O = haar_unitaries(m, 1, rng) if kind != "grid" else np.ones((m, 1, 1), complex)
    else:
        O = haar_unitaries(m, r, rng)
    return ConnectionGraph(n, r, np.asarray(u), np.asarray(v), w, O, planted)


def random_connection_laplacian(n, r=1, degree=4, seed=0, pad=0.0, kind="random-regular"):
    g = generate(kind, n, r, seed, degree=degree)
    M = connection_laplacian(g)
    if pad:
        from .block_core import pad_identity

        M = pad_identity(M, pad)
    return M


def random_bdd(n, r=1, degree=4, seed=0, slack=0.1, extra_psd=True, sign_mix=True):
    """Random sparse bDD matrix with complex blocks.

    Off-diagonal blocks are Gaussian on a random-regular support; each
    diagonal block is (row sum + slack·U[0,1]) I plus, optionally, a small
    random PSD block.
    """
    rng = as_generator(seed)
    u, v = random_regular_edges(n, degree, rng)
    m = len(u)
    blocks = rng.standard_normal((m, r, r)) + 1j * rng.standard_normal((m, r, r))
    if r == 1 and not sign_mix:
        blocks = -np.abs(blocks)
    blocks *= rng.uniform(0.2, 1.0, m)[:, None, None]
    tmp = BlockSparseMatrix.from_coo(n, r, u, v, blocks, mode="mirror_upper")
    sums = tmp.offdiag_row_sums
    eye = np.eye(r)
    diag = (sums + slack * rng.uniform(0, 1, n))[:, None, None] * eye
    if extra_psd:
        z = rng.standard_normal((n, r, r)) + 1j * rng.standard_normal((n, r, r))
        diag = diag + 0.1 * (z @ np.conj(np.swapaxes(z, 1, 2))) / r
    idx = np.arange(n)
    return BlockSparseMatrix.from_coo(
        n, r, np.concatenate((u, idx)), np.concatenate((v, idx)),
        np.concatenate((blocks, diag)), mode="mirror_upper")
