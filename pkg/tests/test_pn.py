import numpy as np
import pytest
import scipy.sparse.csgraph as csgraph
from hypothesis import given, strategies as st

from pngnn import pn
from pngnn.autodiff import Tensor
from pngnn.kg import KnowledgeGraph


def random_graph(seed, n=8, density=0.2):
    rng = np.random.default_rng(seed)
    triples = []
    for r in range(2):
        mask = rng.random((n, n)) < density
        hs, ts = np.nonzero(mask)
        triples.extend((int(h), r, int(t)) for h, t in zip(hs, ts))
    return KnowledgeGraph.from_triples(n, 2, triples)


def scipy_distances(adj, source, max_hops):
    d = csgraph.shortest_path(adj, method="D", unweighted=True,
                              indices=source)
    d[~np.isfinite(d)] = -1
    d[d > max_hops] = -1
    return d.astype(np.int64)


@given(st.integers(0, 10_000))
def test_distances_match_scipy(seed):
    kg = random_graph(seed)
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    for source in range(0, 8, 3):
        got = pn.distances_from(adj, source, 4)
        expect = scipy_distances(adj, source, 4)
        np.testing.assert_array_equal(got, expect)


@given(st.integers(0, 10_000))
def test_distances_to_is_transpose_view(seed):
    kg = random_graph(seed)
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    for target in range(0, 8, 3):
        got = pn.distances_to(adj, target, 4)
        expect = scipy_distances(adj.T.tocsr(), target, 4)
        np.testing.assert_array_equal(got, expect)


def test_adjacency_binarizes_duplicates():
    adj = pn.adjacency(3, np.array([0, 0, 1]), np.array([1, 1, 2]))
    assert adj[0, 1] == 1.0 and adj[1, 2] == 1.0
    assert adj.nnz == 2


@given(st.integers(0, 10_000))
def test_exact_distance_matrices(seed):
    kg = random_graph(seed)
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    mats = pn.exact_distance_matrices(adj, 3)
    full = csgraph.shortest_path(adj, method="D", unweighted=True)
    for j, mat in enumerate(mats, start=1):
        dense = mat.toarray()
        for a in range(8):
            for b in range(8):
                assert dense[a, b] == (1.0 if full[a, b] == j else 0.0), (
                    j, a, b)


def test_stratum_slots_order():
    assert pn.stratum_slots(3) == [(1, 1), (1, 2), (2, 1)]
    assert pn.stratum_slots(4) == [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2),
                                   (3, 1)]


@given(st.integers(0, 10_000))
def test_stratum_members_bruteforce(seed):
    kg = random_graph(seed)
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    full = csgraph.shortest_path(adj, method="D", unweighted=True)
    for (i, j) in pn.stratum_slots(4):
        got = list(pn.stratum_members(adj, 0, 5, i, j))
        expect = [w for w in range(8)
                  if full[0, w] == i and full[w, 5] == j]
        assert got == expect


def test_pool_rows_modes_and_ties():
    h = Tensor(np.array([[1.0, 5.0], [3.0, 1.0], [3.0, -2.0]]))
    rows = np.array([0, 1, 2])
    out, count = pn.pool_rows(h, rows, "sum")
    np.testing.assert_array_equal(out.data, [7.0, 4.0])
    assert count == 3
    out, _ = pn.pool_rows(h, rows, "mean")
    np.testing.assert_allclose(out.data, [7 / 3, 4 / 3])
    out, _ = pn.pool_rows(h, rows, "max")
    np.testing.assert_array_equal(out.data, [3.0, 5.0])
    out, _ = pn.pool_rows(h, rows, "min")
    np.testing.assert_array_equal(out.data, [1.0, -2.0])


def test_pool_rows_empty_is_zero():
    h = Tensor(np.ones((3, 4)))
    for mode in pn.POOL_MODES:
        out, count = pn.pool_rows(h, np.array([], dtype=np.int64), mode)
        np.testing.assert_array_equal(out.data, np.zeros(4))
        assert count == 0


def test_pool_rows_max_tie_prefers_lowest_row():
    h = Tensor(np.array([[2.0], [2.0]]), requires_grad=True)
    out, _ = pn.pool_rows(h, np.array([0, 1]), "max")
    from pngnn.autodiff import tsum
    tsum(out).backward()
    np.testing.assert_array_equal(h.grad, [[1.0], [0.0]])


@given(st.integers(0, 10_000), st.sampled_from(["sum", "mean"]))
def test_strata_table_matches_reference(seed, mode):
    kg = random_graph(seed)
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    table = pn.StrataTable.build(adj, max_j=2)
    rng = np.random.default_rng(seed + 1)
    h = Tensor(rng.normal(size=(8, 3)))
    u = 0
    for (i, j) in pn.stratum_slots(3):
        dist_u = pn.distances_from(adj, u, 2)
        mask = dist_u == i
        pooled = table.pooled(j, mask, h, mode)
        counts = table.counts(j, mask)
        for v in range(8):
            rows = np.array(list(pn.stratum_members(adj, u, v, i, j)),
                            dtype=np.int64)
            ref, ref_count = pn.pool_rows(h, rows, mode)
            np.testing.assert_allclose(pooled.data[v], ref.data, atol=1e-12)
            assert counts[v] == ref_count


@given(st.integers(0, 10_000))
def test_sum_equals_count_times_mean(seed):
    kg = random_graph(seed)
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    table = pn.StrataTable.build(adj, max_j=2)
    rng = np.random.default_rng(seed + 2)
    h = Tensor(rng.normal(size=(8, 3)))
    dist_u = pn.distances_from(adj, 0, 2)
    for (i, j) in pn.stratum_slots(3):
        mask = dist_u == i
        s = table.pooled(j, mask, h, "sum").data
        m = table.pooled(j, mask, h, "mean").data
        c = table.counts(j, mask).reshape(-1, 1)
        np.testing.assert_allclose(s, m * np.maximum(c, 1), atol=1e-12)


def test_batched_pool_rejects_max():
    kg = random_graph(0)
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    table = pn.StrataTable.build(adj, max_j=1)
    h = Tensor(np.ones((8, 2)))
    with pytest.raises(ValueError, match="batched pooling supports"):
        table.pooled(1, np.ones(8, dtype=bool), h, "max")
