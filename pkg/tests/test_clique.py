import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bddsolve.block_core import is_bdd
from bddsolve.clique import (
    bipartite_clique_sparsification, bipartite_product_block_laplacian, clique_sparsification,
    k2_cover, product_block_laplacian,
)
from bddsolve.expanders import WeightedGraph
from bddsolve.oracle import approx_epsilon_psd


def test_product_examples():
    L = product_block_laplacian(np.ones((3, 1, 1)))
    np.testing.assert_allclose(L.to_dense(), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])
    L = product_block_laplacian(np.array([2.0, 3.0]).reshape(2, 1, 1))
    np.testing.assert_allclose(L.to_dense(), [[6, -6], [-6, 6]])


def test_bipartite_example():
    L = bipartite_product_block_laplacian(np.ones((2, 1, 1)), [0])
    np.testing.assert_allclose(L.to_dense(), [[1, -1], [-1, 1]])


@given(st.integers(0, 10**6))
@settings(max_examples=15, deadline=None)
def test_random_r2_products_are_bdd_psd(seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((12, 2, 2)) + 1j * rng.standard_normal((12, 2, 2))
    for L in (product_block_laplacian(d), bipartite_product_block_laplacian(d, [0, 3, 5])):
        assert is_bdd(L)
        assert np.linalg.eigvalsh(L.to_dense())[0] >= -1e-9 * np.abs(L.to_dense()).max()
    Lb = bipartite_product_block_laplacian(d, [0, 3, 5]).to_dense().reshape(12, 2, 12, 2)
    for i in (0, 3, 5):
        for j in (0, 3, 5):
            if i != j:
                assert np.abs(Lb[i, :, j, :]).max() == 0


def test_exact_regime_equals_product():
    d = np.random.default_rng(0).standard_normal((30, 2, 2)) + 0j
    np.testing.assert_allclose(clique_sparsification(d, 0.5, rng=0).to_dense(),
                               product_block_laplacian(d).to_dense(), atol=1e-12)


def test_sparsified_r1_n150():
    rng = np.random.default_rng(4)
    d = (rng.uniform(0.1, 10, 150) * np.exp(2j * np.pi * rng.random(150))).reshape(-1, 1, 1)
    H = clique_sparsification(d, 0.5, rng=1)
    assert approx_epsilon_psd(H.to_dense(), product_block_laplacian(d).to_dense()) <= 2.0


def test_sparsified_r2_n120_bipartite():
    rng = np.random.default_rng(5)
    d = rng.standard_normal((120, 2, 2)) + 1j * rng.standard_normal((120, 2, 2))
    F = np.arange(0, 120, 2)
    H = bipartite_clique_sparsification(d, F, 0.5, rng=2)
    Hd = H.to_dense().reshape(120, 2, 120, 2)
    assert np.abs(Hd[np.ix_(F, [0, 1], F, [0, 1])]
                  - Hd[np.ix_(F, [0, 1], F, [0, 1])] * np.eye(60)[:, None, :, None]).max() == 0
    ref = bipartite_product_block_laplacian(d, F).to_dense()
    assert approx_epsilon_psd(H.to_dense(), ref) <= 2.0


def test_fewer_than_two_nonzero():
    d = np.zeros((4, 2, 2))
    d[1] = np.eye(2)
    assert clique_sparsification(d, 0.5).nnz == 0


def test_k2_cover_identity():
    rng = np.random.default_rng(0)
    G = WeightedGraph.from_edges(6, np.array([0, 1, 2, 3, 0]), np.array([1, 2, 3, 4, 5]),
                                 rng.uniform(1, 2, 5))
    H = k2_cover(G)
    assert H.m == 4 * G.m
    LG = G.laplacian().toarray()
    DG = np.diag(np.diag(LG))
    ref = np.kron(LG, np.ones((2, 2))) + np.kron(DG, np.array([[1, -1], [-1, 1]]))
    np.testing.assert_allclose(H.laplacian().toarray(), ref)
    empty = k2_cover(WeightedGraph.from_edges(3, np.zeros(0, int), np.zeros(0, int)))
    assert empty.m == 0


def test_bad_shape():
    with pytest.raises(ValueError):
        product_block_laplacian(np.ones((3, 2, 3)))
