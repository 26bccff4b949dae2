import numpy as np
import pytest
from hypothesis import given, strategies as st

from pngnn.kg import (DatasetBundle, KnowledgeGraph, LoadError, ValidationError,
                      Triple, augment_inverses, load_dataset, neighbors,
                      save_bundle)


def toy_graph():
    return KnowledgeGraph.from_triples(4, 2, [(0, 0, 1), (1, 1, 2),
                                              (0, 0, 1), (3, 0, 0)])


def test_duplicate_edges_are_kept():
    kg = toy_graph()
    assert kg.num_triples == 4
    outs = neighbors(kg, 0, 0, "out")
    assert sorted(int(x) for x in outs) == [1, 1]


def test_neighbors_directions():
    kg = toy_graph()
    assert sorted(int(x) for x in neighbors(kg, 1, 0, "in")) == [0, 0]
    assert list(neighbors(kg, 2, 1, "in")) == [1]
    assert list(neighbors(kg, 2, 0, "in")) == []


def test_augment_inverses_layout():
    kg = toy_graph()
    aug = augment_inverses(kg)
    assert aug.num_relations == 4
    assert aug.num_base_relations == 2
    assert aug.num_triples == 8
    # inverse block mirrors the base block in order, relation shifted by R0
    np.testing.assert_array_equal(aug.heads[4:], kg.tails)
    np.testing.assert_array_equal(aug.tails[4:], kg.heads)
    np.testing.assert_array_equal(aug.rels[4:], kg.rels + 2)


def test_augment_twice_rejected():
    with pytest.raises(ValidationError):
        augment_inverses(augment_inverses(toy_graph()))


def _tiny_bundle():
    kg = KnowledgeGraph.from_triples(3, 2, [(0, 0, 1), (1, 0, 2)])
    return DatasetBundle(fact_graph=kg,
                         train=[Triple(0, 1, 2)], valid=[Triple(0, 1, 1)],
                         test=[Triple(1, 1, 2)],
                         entity_names=["a", "b", "c"],
                         relation_names=["r", "t"])


def test_save_load_roundtrip(tmp_path):
    bundle = _tiny_bundle()
    save_bundle(bundle, str(tmp_path / "ds"))
    back = load_dataset(str(tmp_path / "ds"), layout="synthetic")
    assert back.entity_names == bundle.entity_names
    assert back.relation_names == bundle.relation_names
    assert back.train == bundle.train
    assert back.valid == bundle.valid
    assert back.test == bundle.test
    np.testing.assert_array_equal(back.fact_graph.heads,
                                  bundle.fact_graph.heads)


def test_synthetic_layout_rejects_target_in_facts(tmp_path):
    path = tmp_path / "bad"
    path.mkdir()
    (path / "facts.txt").write_text("a\tr\tb\na\tt\tb\n")
    (path / "train.txt").write_text("a\tt\tb\n")
    (path / "valid.txt").write_text("a\tt\tb\n")
    (path / "test.txt").write_text("a\tt\tb\n")
    with pytest.raises(ValidationError):
        load_dataset(str(path), layout="synthetic")


def test_missing_split_raises(tmp_path):
    path = tmp_path / "incomplete"
    path.mkdir()
    (path / "train.txt").write_text("a\tr\tb\n")
    with pytest.raises(LoadError):
        load_dataset(str(path), layout="transductive")


def test_inductive_layout(tmp_path):
    root = tmp_path / "ind"
    for half, ents in (("train", "abc"), ("test", "xyz")):
        d = root / half
        d.mkdir(parents=True)
        e = list(ents)
        (d / "train.txt").write_text(f"{e[0]}\tr\t{e[1]}\n"
                                     f"{e[1]}\tr\t{e[2]}\n")
        (d / "valid.txt").write_text(f"{e[0]}\tr\t{e[2]}\n")
        (d / "test.txt").write_text(f"{e[1]}\tr\t{e[0]}\n")
    bundle = load_dataset(str(root), layout="inductive")
    # relation vocabulary is pinned by the train half and shared
    assert bundle.train.relation_names == bundle.test.relation_names
    # entity vocabularies are disjoint by construction here
    assert not (set(bundle.train.entity_names)
                & set(bundle.test.entity_names))


def test_inductive_unknown_relation_rejected(tmp_path):
    root = tmp_path / "ind2"
    for half, rel in (("train", "r"), ("test", "s")):
        d = root / half
        d.mkdir(parents=True)
        (d / "train.txt").write_text(f"a{half}\t{rel}\tb{half}\n")
        (d / "valid.txt").write_text(f"a{half}\t{rel}\tb{half}\n")
        (d / "test.txt").write_text(f"a{half}\t{rel}\tb{half}\n")
    with pytest.raises(ValidationError):
        load_dataset(str(root), layout="inductive")


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2),
                          st.integers(0, 5)), max_size=20))
def test_from_triples_preserves_multiset(triples):
    kg = KnowledgeGraph.from_triples(6, 3, triples)
    got = sorted(zip(kg.heads.tolist(), kg.rels.tolist(), kg.tails.tolist()))
    assert got == sorted(triples)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1),
                          st.integers(0, 4)), max_size=15))
def test_neighbors_match_bruteforce(triples):
    kg = KnowledgeGraph.from_triples(5, 2, triples)
    for v in range(5):
        for r in range(2):
            outs = sorted(int(x) for x in neighbors(kg, v, r, "out"))
            ins = sorted(int(x) for x in neighbors(kg, v, r, "in"))
            assert outs == sorted(t for h, rr, t in triples
                                  if h == v and rr == r)
            assert ins == sorted(h for h, rr, t in triples
                                 if t == v and rr == r)
