import numpy as np
import pytest
from hypothesis import given, strategies as st

from pngnn import logic
from pngnn.kg import KnowledgeGraph
from pngnn.logic import (And, ExistsAtLeast, Not, Pred, Top, FormulaError,
                         PatternError, Signature)


def diamond():
    # 0 -r0-> 1, 0 -r0-> 2, 1 -r1-> 3, 2 -r1-> 3, plus a parallel duplicate
    return KnowledgeGraph.from_triples(
        4, 2, [(0, 0, 1), (0, 0, 2), (1, 1, 3), (2, 1, 3), (2, 1, 3)])


# ------------------------------------------------------------ model checker

def test_top_everywhere():
    kg = diamond()
    np.testing.assert_array_equal(logic.check_all(kg, Top(), {}),
                                  np.ones(4, dtype=bool))


def test_pred_valuation():
    kg = diamond()
    got = logic.check_all(kg, Pred(0), {0: {1, 3}})
    np.testing.assert_array_equal(got, [False, True, False, True])


def test_exists_counts_in_edges():
    kg = diamond()
    # >=1 r0-in-edge from anywhere: nodes 1 and 2
    got = logic.check_all(kg, ExistsAtLeast(1, 0, Top()), {})
    np.testing.assert_array_equal(got, [False, True, True, False])


def test_counting_respects_multiset():
    kg = diamond()
    # node 3 has r1-in-edges 1->3, 2->3, 2->3: the duplicate counts twice
    assert logic.check(kg, ExistsAtLeast(3, 1, Top()), {}, 3)
    assert not logic.check(kg, ExistsAtLeast(4, 1, Top()), {}, 3)
    # but only two distinct sources satisfy P0 = everyone
    got = logic.check_all(kg, ExistsAtLeast(2, 1, Pred(0)), {0: {1, 2}})
    assert bool(got[3]) is True


def test_not_and():
    kg = diamond()
    f = And(Not(Pred(0)), ExistsAtLeast(1, 0, Pred(0)))
    got = logic.check_all(kg, f, {0: {0}})
    # holds at v iff v lacks P0 and has an r0-in-edge from a P0 node
    np.testing.assert_array_equal(got, [False, True, True, False])


def test_check_matches_check_all():
    kg = diamond()
    f = ExistsAtLeast(2, 0, Not(ExistsAtLeast(1, 1, Top())))
    all_vals = logic.check_all(kg, f, {})
    for v in range(4):
        assert logic.check(kg, f, {}, v) == bool(all_vals[v])


def test_depth():
    f = ExistsAtLeast(1, 0, And(Pred(0), ExistsAtLeast(2, 1, Top())))
    assert logic.depth(f) == 3


def test_validate_rejects_bad_ids():
    sig = Signature(num_relations=2, num_predicates=1)
    with pytest.raises(FormulaError):
        logic.validate(Pred(1), sig)
    with pytest.raises(FormulaError):
        logic.validate(ExistsAtLeast(1, 2, Top()), sig)
    with pytest.raises(FormulaError):
        logic.validate(ExistsAtLeast(0, 0, Top()), sig)


def test_formula_json_roundtrip():
    f = ExistsAtLeast(2, 1, And(Not(Pred(0)), ExistsAtLeast(1, 0, Top())))
    assert str(logic.from_json(logic.to_json(f))) == str(f)


@given(st.integers(0, 10_000))
def test_random_formula_validates(seed):
    rng = np.random.default_rng(seed)
    sig = Signature(num_relations=3, num_predicates=2)
    f = logic.random_formula(rng, sig, max_depth=4, max_count=3)
    logic.validate(f, sig)
    assert logic.depth(f) <= 4


def _random_kg(rng, n=6, num_rels=2, density=0.25):
    triples = []
    for r in range(num_rels):
        mask = rng.random((n, n)) < density
        hs, ts = np.nonzero(mask)
        triples.extend((int(h), r, int(t)) for h, t in zip(hs, ts))
    return KnowledgeGraph.from_triples(n, num_rels, triples)


@given(st.integers(0, 10_000))
def test_exists_bruteforce_equivalence(seed):
    rng = np.random.default_rng(seed)
    kg = _random_kg(rng)
    n_req = int(rng.integers(1, 4))
    rel = int(rng.integers(2))
    val = {0: {int(e) for e in np.nonzero(rng.random(6) < 0.5)[0]}}
    inner = Pred(0)
    got = logic.check_all(kg, ExistsAtLeast(n_req, rel, inner), val)
    for v in range(6):
        count = sum(1 for h, r, t in zip(kg.heads, kg.rels, kg.tails)
                    if int(t) == v and int(r) == rel and int(h) in val[0])
        assert bool(got[v]) == (count >= n_req)


# ----------------------------------------------------------- rule patterns

def test_chain_pattern_coverage():
    # 0 ->r0 1 ->r1 2 ->r2 3 and a stray edge
    kg = KnowledgeGraph.from_triples(
        5, 3, [(0, 0, 1), (1, 1, 2), (2, 2, 3), (4, 0, 1)])
    cov = logic.coverage(kg, logic.chain(3))
    assert cov == {(0, 3), (4, 3)}


def test_counted_chain_needs_satellites():
    edges = [(0, 0, 1), (1, 1, 2), (2, 2, 3)]
    kg1 = KnowledgeGraph.from_triples(6, 4, edges + [(4, 3, 2)])
    kg2 = KnowledgeGraph.from_triples(6, 4, edges + [(4, 3, 2), (5, 3, 2)])
    pat1 = logic.counted_chain([0, 1, 2], 1, 3)
    pat2 = logic.counted_chain([0, 1, 2], 2, 3)
    assert logic.coverage(kg1, pat1) == {(0, 3)}
    assert logic.coverage(kg1, pat2) == set()          # one satellite only
    assert logic.coverage(kg2, pat2) == {(0, 3)}


def test_counted_chain_satellites_must_differ():
    # a single satellite with a duplicated edge must not satisfy count=2
    edges = [(0, 0, 1), (1, 1, 2), (2, 2, 3), (4, 3, 2), (4, 3, 2)]
    kg = KnowledgeGraph.from_triples(5, 4, edges)
    assert logic.coverage(kg, logic.counted_chain([0, 1, 2], 2, 3)) == set()


def test_two_chains_shared_vs_split():
    shared = KnowledgeGraph.from_triples(
        5, 5, [(0, 0, 1), (1, 1, 2), (2, 2, 4), (1, 3, 3), (3, 4, 4)])
    split = KnowledgeGraph.from_triples(
        6, 5, [(0, 0, 1), (1, 1, 2), (2, 2, 5), (0, 0, 3), (3, 3, 4),
               (4, 4, 5)])
    u_pat = logic.two_chains(True)
    t_pat = logic.two_chains(False)
    assert logic.coverage(shared, u_pat) == {(0, 4)}
    assert logic.coverage(split, u_pat) == set()
    # the split pattern is a relaxation: both graphs satisfy it
    assert logic.coverage(shared, t_pat) == {(0, 4)}
    assert logic.coverage(split, t_pat) == {(0, 5)}


@given(st.integers(0, 10_000))
def test_covers_pair_matches_coverage(seed):
    rng = np.random.default_rng(seed)
    kg = _random_kg(rng, n=7, num_rels=3, density=0.3)
    pat = logic.chain(2)
    cov = logic.coverage(kg, pat)
    for x in range(7):
        for y in range(7):
            assert logic.covers_pair(kg, pat, x, y) == ((x, y) in cov)


@given(st.integers(0, 10_000))
def test_substitute_constant_shrinks_coverage(seed):
    rng = np.random.default_rng(seed)
    kg = _random_kg(rng, n=7, num_rels=5, density=0.25)
    pat = logic.two_chains(bool(rng.integers(2)))
    free = [v for v in pat.variables() if v not in (pat.x, pat.y)]
    var = free[int(rng.integers(len(free)))]
    entity = int(rng.integers(7))
    sub = logic.substitute_constant(pat, var, entity)
    assert logic.coverage(kg, sub) <= logic.coverage(kg, pat)


@given(st.integers(0, 10_000))
def test_coverage_through_edge_captures_delta(seed):
    rng = np.random.default_rng(seed)
    pat = logic.chain(2)
    kg = _random_kg(rng, n=6, num_rels=2, density=0.2)
    before = logic.coverage(kg, pat)
    h, t = int(rng.integers(6)), int(rng.integers(6))
    r = int(rng.integers(2))
    plus = KnowledgeGraph.from_triples(
        6, 2, list(zip(kg.heads.tolist(), kg.rels.tolist(),
                       kg.tails.tolist())) + [(h, r, t)])
    after = logic.coverage(plus, pat)
    through = logic.coverage_through_edge(plus, pat, h, r, t)
    assert after - before <= through <= after


def test_substitute_rejects_distinguished():
    pat = logic.chain(2)
    with pytest.raises(PatternError):
        logic.substitute_constant(pat, pat.x, 0)


def test_pattern_json_roundtrip():
    pat = logic.counted_chain([0, 1, 2], 2, 3)
    back = logic.pattern_from_json(logic.pattern_to_json(pat))
    assert back == pat


def test_mark_source_formula_checks_target():
    # the marked formula holds exactly at covered tails when P0 = {x}
    kg = KnowledgeGraph.from_triples(4, 2, [(0, 0, 1), (1, 1, 2)])
    pat = logic.chain(2)
    f = logic.mark_source(pat)
    got = logic.check_all(kg, f, {0: {0}})
    cov = logic.coverage(kg, pat)
    for v in range(4):
        assert bool(got[v]) == ((0, v) in cov)
