"""Expander approximations of complete (bipartite) graphs and weighted
expanders that sparsify product-demand graphs.

Graphs are stored through their symmetric adjacency: an undirected edge
{u, v} with u < v carries weight A[u, v], and a self-loop at u carries
weight A[u, u].  Loops contribute to degrees but not to Laplacians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ImprobableFailure, InvalidInputError, SizeLimitError
from .rng import as_generator

EXACT_EDGE_LIMIT = 4096
DENSE_CERT_LIMIT = 2500
LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# graphs


@dataclass(eq=False)
class WeightedGraph:
    n: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    left: np.ndarray | None = None     # bipartition (left part), if any

    @classmethod
    def from_edges(cls, n, u, v, w=None, left=None):
        """Merge parallel edges, orient as u <= v, drop zero weights."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        w = np.ones(len(u)) if w is None else np.asarray(w, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInputError("edge weights must be finite and nonnegative")
        a, b = np.minimum(u, v), np.maximum(u, v)
        key = a * n + b
        uniq, inv = np.unique(key, return_inverse=True)
        ww = np.bincount(inv, weights=w, minlength=len(uniq))
        keep = ww > 0
        uniq, ww = uniq[keep], ww[keep]
        return cls(n, uniq // n, uniq % n, ww, left)

    @classmethod
    def from_adjacency(cls, A, left=None):
        A = sp.coo_matrix(A)
        keep = A.row <= A.col
        return cls.from_edges(A.shape[0], A.row[keep], A.col[keep], A.data[keep], left)

    @property
    def m(self):
        return len(self.u)

    def adjacency(self):
        off = self.u != self.v
        rows = np.concatenate((self.u, self.v[off]))
        cols = np.concatenate((self.v, self.u[off]))
        vals = np.concatenate((self.w, self.w[off]))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def degrees(self):
        return np.asarray(self.adjacency().sum(axis=1)).ravel()

    def laplacian(self):
        off = self.u != self.v
        u, v, w = self.u[off], self.v[off], self.w[off]
        deg = np.bincount(u, weights=w, minlength=self.n) + np.bincount(
            v, weights=w, minlength=self.n)
        rows = np.concatenate((u, v, np.arange(self.n)))
        cols = np.concatenate((v, u, np.arange(self.n)))
        vals = np.concatenate((-w, -w, deg))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def scaled(self, c):
        return WeightedGraph(self.n, self.u, self.v, self.w * c, self.left)

    def without_loops(self):
        off = self.u != self.v
        return WeightedGraph(self.n, self.u[off], self.v[off], self.w[off], self.left)


@dataclass(frozen=True)
class ExpanderCertificate:
    degree: float
    lambda_bound: float
    method: str
    bipartite: bool = False


def complete_graph(n, weight=1.0):
    iu, ju = np.triu_indices(n, 1)
    return WeightedGraph(n, iu, ju, np.full(len(iu), float(weight)))


def complete_bipartite_graph(na, nb, weight=1.0):
    a, b = np.meshgrid(np.arange(na), na + np.arange(nb), indexing="ij")
    return WeightedGraph(na + nb, a.ravel(), b.ravel(), np.full(na * nb, float(weight)),
                         left=np.arange(na))


def product_demand_graph(d):
    d = np.asarray(d, dtype=float)
    iu, ju = np.triu_indices(len(d), 1)
    return WeightedGraph(len(d), iu, ju, d[iu] * d[ju])


def bipartite_product_demand_graph(dA, dB):
    dA, dB = np.asarray(dA, float), np.asarray(dB, float)
    a, b = np.meshgrid(np.arange(len(dA)), np.arange(len(dB)), indexing="ij")
    a, b = a.ravel(), b.ravel()
    return WeightedGraph(len(dA) + len(dB), a, len(dA) + b, dA[a] * dB[b],
                         left=np.arange(len(dA)))


# ---------------------------------------------------------------------------
# number theory


def is_prime(x):
    if x < 2:
        return False
    if x % 2 == 0:
        return x == 2
    f = 3
    while f * f <= x:
        if x % f == 0:
            return False
        f += 2
    return True


def find_prime_1mod4(lo, hi):
    """Smallest prime p ≡ 1 (mod 4) with lo <= p <= hi, or None."""
    for x in range(max(int(math.ceil(lo)), 2), int(math.floor(hi)) + 1):
        if x % 4 == 1 and is_prime(x):
            return x
    return None


def primes_1mod4(lo, hi):
    return [x for x in range(max(int(math.ceil(lo)), 2), int(math.floor(hi)) + 1)
            if x % 4 == 1 and is_prime(x)]


def legendre(a, q):
    t = pow(a % q, (q - 1) // 2, q)
    return -1 if t == q - 1 else t


def _sqrt_minus_one(q):
    for x in range(2, q):
        if (x * x + 1) % q == 0:
            return x
    raise InvalidInputError(f"-1 is not a square mod {q}")


def four_square_solutions(p):
    """All (a0, a1, a2, a3) with Σ a² = p, a0 odd positive, a1..a3 even."""
    out = []
    r = int(math.isqrt(p))
    for a0 in range(1, r + 1, 2):
        rest0 = p - a0 * a0
        for a1 in range(-r, r + 1):
            if a1 % 2:
                continue
            rest1 = rest0 - a1 * a1
            if rest1 < 0:
                continue
            for a2 in range(-r, r + 1):
                if a2 % 2:
                    continue
                rest2 = rest1 - a2 * a2
                if rest2 < 0:
                    continue
                a3 = math.isqrt(rest2)
                if a3 * a3 == rest2 and a3 % 2 == 0:
                    out.append((a0, a1, a2, a3))
                    if a3:
                        out.append((a0, a1, a2, -a3))
    return out


# ---------------------------------------------------------------------------
# LPS Ramanujan graphs


def _normalize(mats, q):
    """Projective normalization: scale each 2x2 matrix (rows of 4 ints) so
    its first nonzero entry equals 1."""
    mats = mats % q
    first = np.where(mats[:, 0] != 0, mats[:, 0], mats[:, 1])
    inv = np.array([pow(int(x), q - 2, q) for x in range(q)], dtype=np.int64)
    return (mats * inv[first][:, None]) % q


def _encode(mats, q):
    return ((mats[:, 0] * q + mats[:, 1]) * q + mats[:, 2]) * q + mats[:, 3]


def lps_ramanujan(p, q, max_vertices=200_000):
    """Cayley graph of PSL(2, q) or PGL(2, q) with the p+1 LPS generators.

    Returns (graph, certificate).  The graph is bipartite (PGL) exactly when
    p is a non-residue mod q; its ``left`` part then holds the elements with
    square determinant.
    """
    if not (is_prime(p) and is_prime(q) and p % 4 == 1 and q % 4 == 1 and p != q):
        raise InvalidInputError("p and q must be distinct primes congruent to 1 mod 4")
    bip = legendre(p, q) == -1
    size = q * (q * q - 1) // (1 if bip else 2)
    if size > max_vertices:
        raise SizeLimitError(f"LPS graph with {size} vertices exceeds the cap")
    i = _sqrt_minus_one(q)
    gens = np.array([[a0 + i * a1, a2 + i * a3, -a2 + i * a3, a0 - i * a1]
                     for a0, a1, a2, a3 in four_square_solutions(p)], dtype=np.int64) % q
    if len(gens) != p + 1:
        raise InvalidInputError("unexpected number of generators")
    ident = np.array([[1, 0, 0, 1]], dtype=np.int64)
    seen_codes = _encode(ident, q)
    verts = [ident]
    frontier = ident
    while len(frontier):
        prod = _mul_all(frontier, gens, q)
        codes = np.unique(_encode(prod, q))
        new = codes[~np.isin(codes, seen_codes)]
        if len(new) == 0:
            break
        seen_codes = np.union1d(seen_codes, new)
        frontier = _decode(new, q)
        verts.append(frontier)
    V = np.concatenate(verts)
    codes = _encode(V, q)
    order = np.argsort(codes)
    V, codes = V[order], codes[order]
    if len(V) != size:
        raise InvalidInputError(f"generated {len(V)} vertices, expected {size}")
    nbr = _mul_all(V, gens, q)
    tgt = np.searchsorted(codes, _encode(nbr, q))
    src = np.repeat(np.arange(len(V)), len(gens))
    A = sp.coo_matrix((np.ones(len(src)), (src, tgt)), shape=(len(V), len(V))).tocsr()
    A = (A + A.T) * 0.5   # each undirected edge appears once from each side
    left = None
    if bip:
        det = (V[:, 0] * V[:, 3] - V[:, 1] * V[:, 2]) % q
        sq = np.array([legendre(int(x), q) == 1 for x in det])
        left = np.flatnonzero(sq)
    G = WeightedGraph.from_adjacency(A, left=left)
    cert = ExpanderCertificate(p + 1, 2.0 * math.sqrt(p), "lps", bip)
    return G, cert


def _mul_all(mats, gens, q):
    """Right-multiply every matrix by every generator, normalized."""
    a, b, c, d = (mats[:, k][:, None] for k in range(4))
    e, f, g, h = (gens[:, k][None, :] for k in range(4))
    out = np.stack(((a * e + b * g), (a * f + b * h), (c * e + d * g), (c * f + d * h)),
                   axis=-1).reshape(-1, 4)
    return _normalize(out, q)


def _decode(codes, q):
    d = codes % q
    c = (codes // q) % q
    b = (codes // q**2) % q
    a = codes // q**3
    return np.stack((a, b, c, d), axis=1)


def double_cover(G: WeightedGraph) -> WeightedGraph:
    """Bipartite lift with adjacency [[0, A], [A, 0]]."""
    n = G.n
    off = G.u != G.v
    u = np.concatenate((G.u, G.v[off]))
    v = np.concatenate((n + G.v, n + G.u[off]))
    w = np.concatenate((G.w, G.w[off]))
    return WeightedGraph.from_edges(2 * n, u, v, w, left=np.arange(n))


def collapse(G: WeightedGraph, left, right, pi) -> WeightedGraph:
    """Identify right vertex ``right[k]`` with left vertex ``pi[k]``.

    Returns the graph on ``len(left)`` vertices (labelled by position in
    ``left``) whose adjacency is B Pᵀ + P Bᵀ for the bipartite adjacency B.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    pi = np.asarray(pi)
    nl = len(left)
    if len(right) != nl or len(pi) != nl or not np.array_equal(np.sort(pi), np.arange(nl)):
        raise InvalidInputError("pi must be a bijection from right to left")
    lpos = np.full(G.n, -1)
    lpos[left] = np.arange(nl)
    rmap = np.full(G.n, -1)
    rmap[right] = pi
    u, v = G.u, G.v
    a = np.where(lpos[u] >= 0, lpos[u], lpos[v])
    b = np.where(lpos[u] >= 0, rmap[v], rmap[u])
    if np.any(a < 0) or np.any(b < 0):
        raise InvalidInputError("graph is not bipartite between left and right")
    Bp = sp.coo_matrix((G.w, (a, b)), shape=(nl, nl)).tocsr()
    return WeightedGraph.from_adjacency(Bp + Bp.T)


# ---------------------------------------------------------------------------
# spectral certification


def nontrivial_lambda(G: WeightedGraph, bipartite=None, dense_limit=DENSE_CERT_LIMIT):
    """max |eigenvalue| of the adjacency orthogonal to the trivial
    eigenvectors (constant, and the ±1 bipartite vector when bipartite)."""
    A = G.adjacency()
    n = G.n
    deg = np.asarray(A.sum(axis=1)).ravel()
    d = deg.mean()
    bip = (G.left is not None) if bipartite is None else bipartite
    if n <= dense_limit:
        w = np.linalg.eigvalsh(A.toarray())
        k = 2 if bip else 1
        mags = np.sort(np.abs(w))
        # remove the trivial ±d
        idx = np.argsort(-np.abs(w))
        rest = np.delete(w, idx[:k])
        return float(np.max(np.abs(rest))) if len(rest) else 0.0, d
    from scipy.sparse.linalg import LinearOperator, eigsh

    one = np.ones(n) / math.sqrt(n)
    vecs = [one]
    if bip:
        s = -np.ones(n)
        s[G.left] = 1.0
        vecs.append(s / math.sqrt(n))
    Q = np.stack(vecs, axis=1)

    def mv(x):
        x = x - Q @ (Q.T @ x)
        y = A @ x
        return y - Q @ (Q.T @ y)

    op = LinearOperator((n, n), matvec=mv, dtype=float)
    vals = eigsh(op, k=2, which="LM", return_eigenvectors=False, tol=1e-10,
                 v0=np.random.default_rng(0).standard_normal(n))
    return float(np.max(np.abs(vals))), d


def approx_eps_from_lambda(lam, d):
    """ε with (n/d)L_G ≈_ε L_{K_n} given nontrivial |λ| <= lam."""
    x = lam / d
    if x >= 1:
        return math.inf
    return max(2.0 * LN2 * x, -math.log(1.0 - x))


# ---------------------------------------------------------------------------
# random certified expanders


def random_regular_multigraph(n, d, rng):
    """Sum of d/2 random permutation matrices P + Pᵀ (d even)."""
    rows, cols = [], []
    for _ in range(d // 2):
        perm = rng.permutation(n)
        rows += [np.arange(n), perm]
        cols += [perm, np.arange(n)]
    A = sp.coo_matrix((np.ones(n * 2 * (d // 2)), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    return WeightedGraph.from_adjacency(A)


def random_bipartite_multigraph(n, d, rng):
    a = np.concatenate([np.arange(n)] * d)
    b = np.concatenate([rng.permutation(n) for _ in range(d)])
    return WeightedGraph.from_edges(2 * n, a, n + b, None, left=np.arange(n))


def random_regular_certified(n, d, epsilon_target, seed=0, max_attempts=50,
                             bipartite=False):
    """Random d-regular multigraph whose certified λ satisfies
    λ <= ε·d/(2 ln 2)."""
    rng = as_generator(seed)
    if not bipartite and d >= n - 1:
        return complete_graph(n), ExpanderCertificate(n - 1, 1.0, "complete")
    if not bipartite and d % 2:
        d += 1
    limit = epsilon_target * d / (2.0 * LN2)
    best = None
    for _ in range(max_attempts):
        G = (random_bipartite_multigraph(n, d, rng) if bipartite
             else random_regular_multigraph(n, d, rng))
        lam, _ = nontrivial_lambda(G, bipartite)
        best = lam if best is None else min(best, lam)
        if lam <= limit:
            return G, ExpanderCertificate(d, lam, "random-certified", bipartite)
    raise ImprobableFailure("no random expander met the certificate",
                            {"n": n, "d": d, "best_lambda": best, "limit": limit})


def _random_degree(epsilon):
    """Smallest even degree whose typical λ ≈ 2√(d−1)·1.1 meets the target."""
    d = 4
    while 2.2 * math.sqrt(d - 1) > epsilon * d / (2.0 * LN2):
        d += 2
    return d


# ---------------------------------------------------------------------------
# approximations of complete graphs


def lps_sizes(q, bipartite):
    return q * (q * q - 1) // 2


def _choose_lps(n, epsilon):
    """Admissible (p, q) with q(q²−1)/2 in [n, 8n] and p in [ε⁻²/2, ε⁻²]."""
    plist = primes_1mod4(epsilon**-2 / 2, epsilon**-2)
    if not plist:
        return None
    q = 5
    while q * (q * q - 1) // 2 <= 8 * n:
        if q % 4 == 1 and is_prime(q) and q * (q * q - 1) // 2 >= n:
            for p in plist:
                if p != q:
                    return p, q
        q += 1
    return None


def expander_approx_complete(n, epsilon, seed=0, use_lps=True):
    """(n', H, achieved_eps) with L_H ≈_{achieved_eps} L_{K_{n'}}, n' >= n."""
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    if n * (n - 1) // 2 <= EXACT_EDGE_LIMIT:
        return n, complete_graph(n), 0.0
    pq = _choose_lps(n, epsilon) if use_lps else None
    if pq is not None:
        p, q = pq
        G, cert = lps_ramanujan(p, q)
        lam, d = cert.lambda_bound, cert.degree
        if cert.bipartite:
            half = len(G.left)
            right = np.setdiff1d(np.arange(G.n), G.left)
            G = collapse(G, G.left, right, np.arange(half))
            lam, d = 2 * lam, 2 * d
        npr = G.n
        eps = approx_eps_from_lambda(lam, d)
        return npr, G.scaled(npr / d), eps
    d = _random_degree(epsilon)
    if d >= n - 1:
        return n, complete_graph(n), 0.0
    G, cert = random_regular_certified(n, d, epsilon, seed)
    return n, G.scaled(n / d), approx_eps_from_lambda(cert.lambda_bound, d)


def expander_approx_bipartite(n, epsilon, seed=0, use_lps=True):
    """(n', H, achieved_eps): H bipartite on n' + n' vertices (left part
    first) with L_H ≈ L_{K_{n',n'}}."""
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    if n * n <= EXACT_EDGE_LIMIT:
        return n, complete_bipartite_graph(n, n), 0.0
    pq = _choose_lps(n, epsilon) if use_lps else None
    if pq is not None:
        p, q = pq
        G, cert = lps_ramanujan(p, q)
        if not cert.bipartite:
            G = double_cover(G)
        else:
            right = np.setdiff1d(np.arange(G.n), G.left)
            perm = np.concatenate((G.left, right))
            inv = np.empty_like(perm)
            inv[perm] = np.arange(len(perm))
            G = WeightedGraph.from_edges(G.n, inv[G.u], inv[G.v], G.w,
                                         left=np.arange(len(G.left)))
        npr = G.n // 2
        d = cert.degree
        eps = approx_eps_from_lambda(cert.lambda_bound, d)
        return npr, G.scaled(npr / d), eps
    d = max(4, _random_degree(epsilon))
    if d >= n:
        return n, complete_bipartite_graph(n, n), 0.0
    G, cert = random_regular_certified(n, d, epsilon, seed, bipartite=True)
    return n, G.scaled(n / d), approx_eps_from_lambda(cert.lambda_bound, d)


# ---------------------------------------------------------------------------
# weighted expanders


def _split(d, t):
    """Copies of each vertex: ⌊d_i/t⌋ at demand t plus one remainder copy."""
    full = np.floor(d / t + 1e-12).astype(np.int64)
    rem = d - full * t
    has_rem = rem > 1e-12 * t
    owner_full = np.repeat(np.arange(len(d)), full)
    owner_rem = np.flatnonzero(has_rem)
    return owner_full, owner_rem, rem[has_rem]


def _partition_round_robin(h_count, k):
    """Class index of each of ``h_count`` vertices, k classes."""
    return np.arange(h_count) % k


def weighted_expander(d, epsilon, seed=0, stats=None):
    """Sparse graph approximating the product-demand graph of ``d``."""
    d = np.asarray(d, dtype=float)
    n = len(d)
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    if np.any(d <= 0):
        raise InvalidInputError("demands must be positive")
    if n * (n - 1) // 2 <= EXACT_EDGE_LIMIT:
        return product_demand_graph(d)
    nhat_target = int(math.ceil(2 * n / epsilon**2)) + 1
    nhat, K, eps_k = expander_approx_complete(nhat_target, epsilon, seed)
    t = d.sum() / (nhat + n)
    owner_full, owner_rem, rem = _split(d, t)
    H_owner = owner_full[:nhat]
    L_owner = np.concatenate((owner_full[nhat:], owner_rem))
    L_dem = np.concatenate((np.full(len(owner_full) - nhat, t), rem))
    k = len(L_owner)
    us = [H_owner[K.u]]
    vs = [H_owner[K.v]]
    ws = [K.w * t * t]
    if k:
        cls = _partition_round_robin(nhat, k)
        size = np.bincount(cls, minlength=k)
        us.append(L_owner[cls])
        vs.append(H_owner)
        ws.append((nhat / size[cls]) * L_dem[cls] * t)
    if stats is not None:
        stats.update(nhat=nhat, t=t, k=k, expander_eps=eps_k, k_over_n=k / n)
    G = WeightedGraph.from_edges(n, np.concatenate(us), np.concatenate(vs), np.concatenate(ws))
    return G.without_loops()


def weighted_bipartite_expander(dA, dB, epsilon, seed=0, stats=None):
    """Sparse bipartite graph approximating the bipartite product-demand
    graph of (dA, dB); vertices 0..nA−1 form the left part."""
    dA = np.asarray(dA, dtype=float)
    dB = np.asarray(dB, dtype=float)
    nA, nB = len(dA), len(dB)
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    if np.any(dA <= 0) or np.any(dB <= 0):
        raise InvalidInputError("demands must be positive")
    if nA * nB <= EXACT_EDGE_LIMIT:
        return bipartite_product_demand_graph(dA, dB)
    nmax = max(nA, nB)
    nhat_target = int(math.ceil(2 * nmax / epsilon**2)) + 1
    nhat, K, eps_k = expander_approx_bipartite(nhat_target, epsilon, seed)
    tA = dA.sum() / (nhat + nA)
    tB = dB.sum() / (nhat + nB)
    fa, ra, rema = _split(dA, tA)
    fb, rb, remb = _split(dB, tB)
    HA, HB = fa[:nhat], fb[:nhat]
    LA = np.concatenate((fa[nhat:], ra))
    LAd = np.concatenate((np.full(len(fa) - nhat, tA), rema))
    LB = np.concatenate((fb[nhat:], rb))
    LBd = np.concatenate((np.full(len(fb) - nhat, tB), remb))
    left_mask = K.u < nhat
    ku = np.where(left_mask, K.u, K.v)
    kv = np.where(left_mask, K.v, K.u) - nhat
    us = [HA[ku]]
    vs = [nA + HB[kv]]
    ws = [K.w * tA * tB]
    for Lown, Ldem, Hother, tother, from_left in (
            (LA, LAd, HB, tB, True), (LB, LBd, HA, tA, False)):
        k = len(Lown)
        if not k:
            continue
        cls = _partition_round_robin(nhat, k)
        size = np.bincount(cls, minlength=k)
        wts = (nhat / size[cls]) * Ldem[cls] * tother
        if from_left:
            us.append(Lown[cls])
            vs.append(nA + Hother)
        else:
            us.append(Hother)
            vs.append(nA + Lown[cls])
        ws.append(wts)
    if stats is not None:
        stats.update(nhat=nhat, tA=tA, tB=tB, kA=len(LA), kB=len(LB), expander_eps=eps_k)
    return WeightedGraph.from_edges(nA + nB, np.concatenate(us), np.concatenate(vs),
                                    np.concatenate(ws), left=np.arange(nA))
