import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bddsolve.block_core import BlockSparseMatrix, expand_index
from bddsolve.builder import (
    BuilderParams, decompose, practical_params, recursive_construct, recursive_eps, udu_eps,
    udu_solve,
)
from bddsolve.chain import (
    apply_chain, chain_error_bound, pseudo_apply, pseudo_delta, refine, solve_regularized,
)
from bddsolve.errors import DivergenceError, InvalidInputError
from bddsolve.generators import connection_laplacian, generate, random_connection_laplacian
from bddsolve.oracle import approx_epsilon, dense_solve


def _dense_operator(chain, n, r):
    eye = np.eye(n * r, dtype=complex).reshape(n, r, n * r)
    return apply_chain(chain, eye).reshape(n * r, n * r)


def test_schedules():
    assert udu_eps(1) == pytest.approx(1 / 72)
    assert udu_eps(2) == pytest.approx(1 / 128)
    assert recursive_eps(0) == pytest.approx(1 / 64)
    assert chain_error_bound([]) == 0
    assert chain_error_bound([0.1, 0.2]) == pytest.approx(0.6)
    ref = sum(2 * (i + 8.0) ** -2 for i in range(10))
    assert chain_error_bound([recursive_eps(i) for i in range(10)]) == pytest.approx(ref)


def test_small_input_is_terminal_only():
    M = random_connection_laplacian(300, 1, seed=0, pad=0.1)
    chain = recursive_construct(M)
    assert chain.depth == 0
    b = np.random.default_rng(0).standard_normal((300, 1)) + 0j
    np.testing.assert_allclose(apply_chain(chain, b), dense_solve(M, b), rtol=1e-10, atol=1e-12)


def test_exact_levels_invert():
    M = random_connection_laplacian(120, 2, seed=1, pad=0.1)
    p = BuilderParams(terminal_size=60, sparsify=False, clique_mode="exact",
                      eps_schedule=lambda i: 1e-12)
    chain = recursive_construct(M, p)
    b = np.random.default_rng(1).standard_normal((120, 2)) + 0j
    x = apply_chain(chain, b)
    assert np.linalg.norm(M.matvec(x) - b) / np.linalg.norm(b) < 1e-8


def test_chain_certification_n200_r2():
    M = random_connection_laplacian(200, 2, seed=2, pad=0.01)
    chain = recursive_construct(M, BuilderParams(terminal_size=40, factory="exact", seed=2))
    assert chain.depth >= 3
    W = _dense_operator(chain, 200, 2)
    e = approx_epsilon(np.linalg.inv(0.5 * (W + W.conj().T)), M.to_dense())
    assert e <= chain_error_bound(chain) + 1e-6 + 0.5


def test_level_sizes_shrink_geometrically():
    M = random_connection_laplacian(3000, 1, seed=3, pad=0.01)
    st_ = {}
    recursive_construct(M, practical_params(terminal_size=500, seed=3), st_)
    sizes = [e["n"] for e in st_["log"]]
    beta = max(b / a for a, b in zip(sizes, sizes[1:] + [sizes[-1] - st_["log"][-1]["F"]]))
    assert beta <= 0.99
    cap = 64 * math.log(3000)
    assert max(e["nnz_blocks"] / e["n"] for e in st_["log"]) <= cap


def test_path_matching_5000_converges():
    g = generate("path-matching", 5000, 1, seed=4)
    from bddsolve.block_core import pad_identity

    M = pad_identity(connection_laplacian(g), 0.01)
    chain = recursive_construct(M, practical_params(5000, seed=4))
    b = np.random.default_rng(4).standard_normal((5000, 1)) + 0j
    res = refine(chain, M, b, tol=1e-8, max_iters=40, method="pcg")
    assert res.iterations <= 40
    assert res.history[-1] <= 1e-8


def test_refine_examples():
    M = random_connection_laplacian(50, 1, seed=5, pad=0.5)
    A = M.to_dense()
    Ainv = np.linalg.inv(A)
    b = np.random.default_rng(5).standard_normal((50, 1)) + 0j

    def exact(v):
        return (Ainv @ v.reshape(50, -1)).reshape(v.shape)

    assert refine(exact, M, b, tol=1e-10).iterations == 1
    res = refine(lambda v: 0.5 * exact(v), M, b, tol=1e-6, max_iters=60)
    rates = np.array(res.history[1:]) / np.array(res.history[:-1])
    np.testing.assert_allclose(rates, 0.5, rtol=1e-6)
    with pytest.raises(DivergenceError) as info:
        refine(lambda v: 0.01 * exact(v), M, b, tol=1e-12, max_iters=3)
    assert len(info.value.args) >= 1
    assert refine(exact, M, np.zeros_like(b)).iterations == 0


def test_regularized_solve_residual():
    M = random_connection_laplacian(80, 1, seed=6, pad=0.2)
    w = np.linalg.eigvalsh(M.to_dense())
    b = np.random.default_rng(6).standard_normal((80, 1)) + 0j

    def builder(Ms, eps):
        A = np.linalg.inv(Ms.to_dense())
        return lambda v: (A @ v.reshape(80, -1)).reshape(v.shape)

    for eps in (0.1, 0.01):
        x = solve_regularized(M, b, eps, w[0], builder)
        rel = np.linalg.norm(M.matvec(x) - b) / np.linalg.norm(b)
        assert rel <= 2 * math.sqrt(eps)
    assert not np.any(solve_regularized(M, 0 * b, 0.1, w[0], builder))


def test_laplacian_regularized_m_norm():
    M = connection_laplacian(generate("grid", 49, 1))
    A = M.to_dense().real
    n = M.n
    w = np.linalg.eigvalsh(A)
    mu = w[1]
    b = np.random.default_rng(7).standard_normal((n, 1))
    b -= b.mean()
    xs = np.linalg.pinv(A) @ b

    def builder(Ms, eps):
        B = np.linalg.inv(Ms.to_dense())
        return lambda v: (B @ v.reshape(n, -1)).reshape(v.shape)

    eps = 0.05
    x = solve_regularized(M, b + 0j, eps, mu, builder).real
    err = np.sqrt((x - xs).T @ A @ (x - xs)).item()
    assert err <= 6 * eps * np.sqrt(xs.T @ A @ xs).item()


def test_pseudo_apply_identity_and_null():
    M = BlockSparseMatrix.identity(4, 1)
    b = np.arange(4.0).reshape(4, 1) + 0j
    np.testing.assert_allclose(pseudo_apply(M, lambda v: v, b, 0.1, 1.0), b)
    L = connection_laplacian(generate("grid", 9, 1))
    one = np.ones((9, 1), complex)
    out = pseudo_apply(L, lambda v: v, one, 0.1, 10.0)
    assert np.abs(out).max() <= 1e-9
    with pytest.raises(InvalidInputError):
        pseudo_apply(M, lambda v: v, b, 0.1, 10.0, solver_delta=1.0)
    assert pseudo_delta(0.1, 2.0) == pytest.approx(0.1 / (56 * 8))


def test_practical_params_overrides():
    p = practical_params(10000, seed=3)
    assert p.terminal_size == 2000 and p.seed == 3
    with pytest.raises(InvalidInputError):
        practical_params(bogus=1)


# -- UDU ---------------------------------------------------------------------

def test_udu_diagonal():
    D = BlockSparseMatrix.block_diagonal(np.stack([np.eye(2) * (i + 1) for i in range(5)]) + 0j)
    f = decompose(D, BuilderParams(terminal_size=2))
    np.testing.assert_allclose(f.dense_U(), np.eye(10))
    order = expand_index(f.order, 2)
    np.testing.assert_allclose(f.dense_D(), D.to_dense()[np.ix_(order, order)])


def test_udu_n200_r2_certified():
    M = random_connection_laplacian(200, 2, seed=8, pad=0.01)
    p = BuilderParams(eps_schedule=lambda i: udu_eps(i + 1), low_degree=True, terminal_size=30,
                      factory="exact", seed=8)
    f = decompose(M, p)
    U, D = f.dense_U(), f.dense_D()
    order = expand_index(f.order, 2)
    Mp = M.to_dense()[np.ix_(order, order)]
    assert approx_epsilon(U.conj().T @ D @ U, Mp) <= 0.75 + 0.05
    assert np.all(np.tril(U, -1) == 0) and np.all(np.diag(U) == 1)


def test_udu_solve_matches_dense_and_is_linear():
    M = random_connection_laplacian(100, 1, seed=9, pad=0.05)
    f = decompose(M, practical_params(terminal_size=20, seed=9))
    rng = np.random.default_rng(9)
    b1 = rng.standard_normal((100, 1)) + 0j
    b2 = rng.standard_normal((100, 1)) + 0j
    np.testing.assert_allclose(udu_solve(f, 2 * b1 + b2), 2 * udu_solve(f, b1) + udu_solve(f, b2),
                               atol=1e-10)
    res = refine(lambda v: udu_solve(f, v), M, b1, tol=1e-8, max_iters=60, method="pcg")
    x = dense_solve(M, b1)
    assert np.linalg.norm(res.x - x) / np.linalg.norm(x) <= 1e-7


@given(st.integers(0, 10**6))
@settings(max_examples=5, deadline=None)
def test_udu_triangular_property(seed):
    M = random_connection_laplacian(80, 1 + seed % 2, seed=seed, pad=0.05)
    f = decompose(M, practical_params(terminal_size=15, seed=seed))
    U = f.dense_U()
    assert np.all(np.tril(U, -1) == 0) and np.all(np.diag(U) == 1)
