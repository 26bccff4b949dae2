"""Knowledge-graph storage, dataset loading, and inverse-relation augmentation.

Triples are stored as parallel int64 arrays in file order. Duplicate triples
are kept: the graph is a multiset of edges, and downstream counting semantics
(both the logic checker and message aggregation) depend on multiplicities.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


class KgError(Exception):
    """Base class for dataset and graph errors."""


class LoadError(KgError):
    """A required file or directory is missing."""


class ParseError(KgError):
    """A data file line could not be parsed; message names file and line."""


class ValidationError(KgError):
    """Loaded data violates a layout contract."""


@dataclass
class KnowledgeGraph:
    """Edge multiset over integer entity and relation ids.

    ``num_base_relations`` tracks the relation count before inverse
    augmentation; it equals ``num_relations`` for raw graphs.
    """

    num_entities: int
    num_relations: int
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    num_base_relations: int = -1

    # lazily built (relation, node) -> neighbor buckets
    _out_index: dict | None = field(default=None, repr=False, compare=False)
    _in_index: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.num_base_relations < 0:
            self.num_base_relations = self.num_relations
        for name in ("heads", "rels", "tails"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            setattr(self, name, arr)
        if not (len(self.heads) == len(self.rels) == len(self.tails)):
            raise ValidationError("triple arrays have mismatched lengths")
        if len(self.heads):
            if self.heads.min() < 0 or self.heads.max() >= self.num_entities:
                raise ValidationError("head entity id out of range")
            if self.tails.min() < 0 or self.tails.max() >= self.num_entities:
                raise ValidationError("tail entity id out of range")
            if self.rels.min() < 0 or self.rels.max() >= self.num_relations:
                raise ValidationError("relation id out of range")

    @classmethod
    def from_triples(cls, num_entities: int, num_relations: int,
                     triples: Iterable[tuple[int, int, int]]) -> "KnowledgeGraph":
        trip = list(triples)
        if trip:
            h, r, t = (np.array(col, dtype=np.int64) for col in zip(*trip))
        else:
            h = r = t = np.zeros(0, dtype=np.int64)
        return cls(num_entities, num_relations, h, r, t)

    @property
    def num_triples(self) -> int:
        return len(self.heads)

    @property
    def inverse_augmented(self) -> bool:
        return self.num_relations != self.num_base_relations

    def triples(self) -> list[Triple]:
        return [Triple(int(h), int(r), int(t))
                for h, r, t in zip(self.heads, self.rels, self.tails)]

    def _build_index(self, direction: str) -> dict:
        index: dict[tuple[int, int], list[int]] = {}
        if direction == "out":
            keys, vals = zip(self.heads, self.rels), self.tails
        else:
            keys, vals = zip(self.tails, self.rels), self.heads
        for (node, rel), other in zip(keys, vals):
            index.setdefault((int(node), int(rel)), []).append(int(other))
        for bucket in index.values():
            bucket.sort()
        return index


def neighbors(kg: KnowledgeGraph, v: int, rel: int, direction: str = "in") -> np.ndarray:
    """Neighbor multiset of ``v`` along ``rel`` as a sorted int64 array.

    ``direction="in"`` lists heads of edges (w, rel, v); ``"out"`` lists tails
    of edges (v, rel, w). Parallel edges appear once per occurrence.
    """
    if direction not in ("in", "out"):
        raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
    if not (0 <= v < kg.num_entities):
        raise ValidationError(f"entity {v} out of range")
    if not (0 <= rel < kg.num_relations):
        raise ValidationError(f"relation {rel} out of range")
    if direction == "out":
        if kg._out_index is None:
            kg._out_index = kg._build_index("out")
        bucket = kg._out_index.get((v, rel), [])
    else:
        if kg._in_index is None:
            kg._in_index = kg._build_index("in")
        bucket = kg._in_index.get((v, rel), [])
    return np.array(bucket, dtype=np.int64)


def augment_inverses(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Append a reversed copy (t, r + R0, h) of every edge.

    The result has 2 * R0 relations. Augmenting an already augmented graph is
    an error; strip first.
    """
    if kg.inverse_augmented:
        raise ValidationError("graph is already inverse-augmented")
    r0 = kg.num_relations
    return KnowledgeGraph(
        num_entities=kg.num_entities,
        num_relations=2 * r0,
        heads=np.concatenate([kg.heads, kg.tails]),
        rels=np.concatenate([kg.rels, kg.rels + r0]),
        tails=np.concatenate([kg.tails, kg.heads]),
        num_base_relations=r0,
    )


def strip_inverses(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Drop relations >= R0, undoing :func:`augment_inverses`."""
    r0 = kg.num_base_relations
    keep = kg.rels < r0
    return KnowledgeGraph(kg.num_entities, r0,
                          kg.heads[keep], kg.rels[keep], kg.tails[keep])


@dataclass
class DatasetBundle:
    """A fact graph plus supervision splits and name vocabularies.

    Vocabularies are in first-appearance order over (facts, train, valid,
    test), so loading is deterministic given the files.
    """

    fact_graph: KnowledgeGraph
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    entity_names: list[str]
    relation_names: list[str]

    @property
    def num_entities(self) -> int:
        return self.fact_graph.num_entities

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def target_relation(self) -> int | None:
        """The single supervision relation absent from facts, if any."""
        fact_rels = set(int(r) for r in self.fact_graph.rels)
        sup_rels = {r for split in (self.train, self.valid, self.test)
                    for (_, r, _) in split}
        extra = sorted(sup_rels - fact_rels)
        if len(extra) == 1:
            return extra[0]
        return None

    def all_positive_triples(self) -> list[Triple]:
        """Fact and supervision triples together (the filtering universe)."""
        return self.fact_graph.triples() + self.train + self.valid + self.test


@dataclass
class InductiveBundle:
    """Two independent graphs over a shared relation vocabulary."""

    train: DatasetBundle
    test: DatasetBundle


def _read_triple_lines(path: str) -> list[tuple[str, str, str]]:
    if not os.path.isfile(path):
        raise LoadError(f"missing data file: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def _load_flat_dir(path: str, layout: str,
                   relation_vocab: dict[str, int] | None = None) -> DatasetBundle:
    """Load a facts/train/valid/test directory into a bundle.

    When facts.txt is absent (plain transductive layout) the train triples
    double as the fact graph. ``relation_vocab`` pins relation ids (used for
    the test half of inductive layouts); unseen relations are then an error.
    """
    facts_path = os.path.join(path, "facts.txt")
    has_facts = os.path.isfile(facts_path)
    if layout == "synthetic" and not has_facts:
        raise LoadError(f"synthetic layout requires facts.txt in {path}")

    raw = {}
    if has_facts:
        raw["facts"] = _read_triple_lines(facts_path)
    for split in ("train", "valid", "test"):
        raw[split] = _read_triple_lines(os.path.join(path, split + ".txt"))

    ent_vocab: dict[str, int] = {}
    rel_vocab: dict[str, int] = dict(relation_vocab) if relation_vocab else {}
    rel_frozen = relation_vocab is not None

    def ent_id(name: str) -> int:
        if name not in ent_vocab:
            ent_vocab[name] = len(ent_vocab)
        return ent_vocab[name]

    def rel_id(name: str, where: str) -> int:
        if name not in rel_vocab:
            if rel_frozen:
                raise ValidationError(
                    f"relation {name!r} in {where} is not in the pinned vocabulary")
            rel_vocab[name] = len(rel_vocab)
        return rel_vocab[name]

    ids: dict[str, list[Triple]] = {}
    order = (["facts"] if has_facts else []) + ["train", "valid", "test"]
    for part in order:
        ids[part] = [Triple(ent_id(h), rel_id(r, part), ent_id(t))
                     for h, r, t in raw[part]]

    fact_triples = ids["facts"] if has_facts else ids["train"]

    # entities referenced by eval splits must exist in the graph-or-train part
    seen = {h for h, _, t in fact_triples} | {t for h, _, t in fact_triples}
    seen |= {h for h, _, t in ids["train"]} | {t for h, _, t in ids["train"]}
    ent_names = [None] * len(ent_vocab)
    for name, i in ent_vocab.items():
        ent_names[i] = name
    for split in ("valid", "test"):
        for h, _, t in ids[split]:
            for e in (h, t):
                if e not in seen:
                    raise ValidationError(
                        f"entity {ent_names[e]!r} appears only in {split}.txt of {path}")

    rel_names = [None] * len(rel_vocab)
    for name, i in rel_vocab.items():
        rel_names[i] = name

    graph = KnowledgeGraph.from_triples(len(ent_vocab), len(rel_vocab), fact_triples)
    bundle = DatasetBundle(graph, ids["train"], ids["valid"], ids["test"],
                           ent_names, rel_names)

    if layout == "synthetic":
        fact_rels = {r for _, r, _ in fact_triples}
        sup_rels = {r for s in ("train", "valid", "test") for _, r, _ in ids[s]}
        overlap = fact_rels & sup_rels
        if overlap:
            names = sorted(rel_names[r] for r in overlap)
            raise ValidationError(
                f"synthetic target relation(s) {names} also appear in facts.txt")
        if len(sup_rels) != 1:
            raise ValidationError(
                f"synthetic layout expects one target relation, found {len(sup_rels)}")
    return bundle


def load_dataset(path: str, layout: str = "transductive") -> DatasetBundle | InductiveBundle:
    """Load a dataset directory.

    Layouts:
      transductive  train/valid/test.txt (+ optional facts.txt) in one dir
      synthetic     like transductive but facts.txt required and the
                    supervision relation must not occur in facts
      inductive     train/ and test/ subdirectories, each in the flat layout,
                    with the relation vocabulary pinned by the train half
    """
    if layout not in ("transductive", "synthetic", "inductive"):
        raise ValueError(f"unknown layout {layout!r}")
    if not os.path.isdir(path):
        raise LoadError(f"dataset directory not found: {path}")
    if layout in ("transductive", "synthetic"):
        return _load_flat_dir(path, layout)
    train_dir = os.path.join(path, "train")
    test_dir = os.path.join(path, "test")
    for d in (train_dir, test_dir):
        if not os.path.isdir(d):
            raise LoadError(f"inductive layout requires subdirectory {d}")
    train_bundle = _load_flat_dir(train_dir, "transductive")
    rel_vocab = {n: i for i, n in enumerate(train_bundle.relation_names)}
    test_bundle = _load_flat_dir(test_dir, "transductive", relation_vocab=rel_vocab)
    return InductiveBundle(train_bundle, test_bundle)


def save_bundle(bundle: DatasetBundle, path: str, write_facts: bool = True) -> None:
    """Write a bundle back to the flat directory layout."""
    os.makedirs(path, exist_ok=True)
    ents, rels = bundle.entity_names, bundle.relation_names

    def dump(name: str, triples: Iterable[tuple[int, int, int]]):
        with open(os.path.join(path, name), "w", encoding="utf-8") as fh:
            for h, r, t in triples:
                fh.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")

    if write_facts:
        dump("facts.txt", zip(bundle.fact_graph.heads, bundle.fact_graph.rels,
                              bundle.fact_graph.tails))
    dump("train.txt", bundle.train)
    dump("valid.txt", bundle.valid)
    dump("test.txt", bundle.test)
