"""Synthetic rule-structure datasets.

Eight datasets, one rule family each. The fact graph carries the rule
structures plus uniform noise over the structure relations; supervision
triples (x, target, y) are exactly the pairs the rule pattern covers, split
by fixed quotas. Generation is three steps: plant rule instances, inject
noise, complete accidental matches — under the default "reject_coverage"
noise policy a candidate noise edge that would change the pattern's coverage
is redrawn, so the quotas stay exact and the completion step finds nothing;
the "free" policy accepts everything and lets completion add the extras to
the train split.

Structure plans (counts calibrated to the published scale targets):

  C3/C4   chain rules, clustered H heads x W tails per shared spine so the
          pair count vastly exceeds the edge count.
  I1/I2   3-edge chains whose middle node needs >= n satellite in-edges;
          decoy instances carry exactly n - 1 satellites, making the count
          decisive.
  T       two parallel 3-edge chains (distinct first mids), one pair each.
  U       the same two chains forced through one shared first mid; half the
          cluster heads also grow a "crossed double-T" confuser — two
          T-shaped structures sharing the head whose tails are wired so that
          every confuser node is bisimilar (on the inverse-augmented graph)
          to its counterpart in a true instance. Conditioned message passing
          therefore cannot place the true tails above the confuser tails,
          while the (1,2) path-neighbor stratum still counts 1 mid for true
          pairs and 2 for confuser pairs.
  T_label / U_label   same generators, but the test-split instances are
          built from entirely fresh entities (audited), measuring
          generalization away from the entities seen in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import logic
from .kg import DatasetBundle, KnowledgeGraph, Triple
from .logic import RulePattern

STRUCTURES = ("C3", "C4", "I1", "I2", "T", "U", "T_label", "U_label")
NOISE_POLICIES = ("reject_coverage", "free")


class GenerationError(Exception):
    """Inconsistent generator configuration."""


@dataclass(frozen=True)
class _Plan:
    family: str                      # chain | counted | two_split | two_shared
    splits: tuple[int, int, int]     # train / valid / test pair quotas
    noise: int
    chain_length: int = 3
    heads: int = 1                   # cluster heads (chain/counted)
    tails: int = 1                   # cluster tails (chain/counted/shared)
    count: int = 0                   # satellite threshold (counted)
    decoys: int = 0                  # counted: instances with count-1 satellites
    confusers: int = 0               # shared: crossed double-T attachments
    fresh_test: bool = False         # test instances on fresh entities


PLANS: dict[str, _Plan] = {
    "C3": _Plan("chain", (1358, 86, 254), noise=192, chain_length=3,
                heads=3, tails=3),
    "C4": _Plan("chain", (2265, 143, 424), noise=243, chain_length=4,
                heads=4, tails=4),
    "I1": _Plan("counted", (304, 20, 57), noise=69, heads=2, tails=2,
                count=1, decoys=40),
    "I2": _Plan("counted", (674, 43, 126), noise=21, heads=2, tails=2,
                count=2, decoys=8),
    "T": _Plan("two_split", (83, 6, 15), noise=1618),
    "U": _Plan("two_shared", (314, 21, 145), noise=14, tails=3, confusers=77),
    "T_label": _Plan("two_split", (83, 6, 50), noise=1978, fresh_test=True),
    "U_label": _Plan("two_shared", (396, 26, 74), noise=8, tails=2,
                     confusers=112, fresh_test=True),
}


@dataclass
class SynthConfig:
    structure: str
    seed: int = 0
    splits: tuple[int, int, int] | None = None
    noise: int | None = None
    noise_policy: str = "reject_coverage"
    confusers: int | None = None
    decoys: int | None = None

    def plan(self) -> _Plan:
        if self.structure not in PLANS:
            raise GenerationError(f"unknown structure {self.structure!r}; "
                                  f"expected one of {STRUCTURES}")
        if self.noise_policy not in NOISE_POLICIES:
            raise GenerationError(f"noise_policy must be one of {NOISE_POLICIES}")
        base = PLANS[self.structure]
        splits = tuple(self.splits) if self.splits is not None else base.splits
        if len(splits) != 3 or any(s < 0 for s in splits) or sum(splits) == 0:
            raise GenerationError("splits must be three non-negative counts")
        return _Plan(family=base.family, splits=splits,
                     noise=base.noise if self.noise is None else self.noise,
                     chain_length=base.chain_length, heads=base.heads,
                     tails=base.tails, count=base.count,
                     decoys=base.decoys if self.decoys is None else self.decoys,
                     confusers=(base.confusers if self.confusers is None
                                else self.confusers),
                     fresh_test=base.fresh_test)

    def to_json(self) -> dict:
        return {"structure": self.structure, "seed": self.seed,
                "splits": list(self.splits) if self.splits else None,
                "noise": self.noise, "noise_policy": self.noise_policy,
                "confusers": self.confusers, "decoys": self.decoys}


def pattern_for(structure: str) -> tuple[RulePattern, int]:
    """The rule pattern and the target-relation id for one structure."""
    plan = PLANS[structure]
    if plan.family == "chain":
        return logic.chain(plan.chain_length), plan.chain_length
    if plan.family == "counted":
        return logic.counted_chain([0, 1, 2], plan.count, 3), 4
    if plan.family == "two_split":
        return logic.two_chains(False), 5
    return logic.two_chains(True), 5


def _num_structure_relations(structure: str) -> int:
    return pattern_for(structure)[1]  # structure rels are 0 .. target-1


class _Builder:
    """Accumulates entities, fact edges, and supervised pairs."""

    def __init__(self):
        self.num_entities = 0
        self.edges: list[tuple[int, int, int]] = []
        self.edge_set: set[tuple[int, int, int]] = set()
        self.pairs: list[tuple[int, int]] = []
        self.instance_entities: list[set[int]] = []  # per rule instance

    def fresh(self, k: int) -> list[int]:
        out = list(range(self.num_entities, self.num_entities + k))
        self.num_entities += k
        return out

    def add_edge(self, h: int, r: int, t: int) -> None:
        self.edges.append((h, r, t))
        self.edge_set.add((h, r, t))


def _emit_chain_cluster(b: _Builder, length: int, heads: int, tails: int) -> None:
    xs = b.fresh(heads)
    spine = b.fresh(length - 1)
    ys = b.fresh(tails)
    for x in xs:
        b.add_edge(x, 0, spine[0])
    for i in range(length - 2):
        b.add_edge(spine[i], i + 1, spine[i + 1])
    for y in ys:
        b.add_edge(spine[-1], length - 1, y)
    b.instance_entities.append(set(xs) | set(spine) | set(ys))
    b.pairs.extend((x, y) for x in xs for y in ys)


def _emit_counted_cluster(b: _Builder, heads: int, tails: int,
                          satellites: int, supervised: bool) -> None:
    xs = b.fresh(heads)
    z1, z2 = b.fresh(2)
    ys = b.fresh(tails)
    sats = b.fresh(satellites)
    for x in xs:
        b.add_edge(x, 0, z1)
    b.add_edge(z1, 1, z2)
    for y in ys:
        b.add_edge(z2, 2, y)
    for s in sats:
        b.add_edge(s, 3, z2)
    b.instance_entities.append(set(xs) | {z1, z2} | set(ys) | set(sats))
    if supervised:
        b.pairs.extend((x, y) for x in xs for y in ys)


def _emit_split_pair(b: _Builder) -> None:
    x, a1, bb, a2, cc, y = b.fresh(6)
    b.add_edge(x, 0, a1)
    b.add_edge(a1, 1, bb)
    b.add_edge(bb, 2, y)
    b.add_edge(x, 0, a2)
    b.add_edge(a2, 3, cc)
    b.add_edge(cc, 4, y)
    b.instance_entities.append({x, a1, bb, a2, cc, y})
    b.pairs.append((x, y))


def _emit_shared_cluster(b: _Builder, tails: int) -> int:
    """One shared-mid cluster; returns the head (for confuser attachment)."""
    x, a, bb, cc = b.fresh(4)
    ys = b.fresh(tails)
    b.add_edge(x, 0, a)
    b.add_edge(a, 1, bb)
    b.add_edge(a, 3, cc)
    for y in ys:
        b.add_edge(bb, 2, y)
    for y in ys:
        b.add_edge(cc, 4, y)
    b.instance_entities.append({x, a, bb, cc} | set(ys))
    b.pairs.extend((x, y) for y in ys)
    return x


def _emit_confuser(b: _Builder, head: int, tails: int) -> list[int]:
    """Crossed double-T at ``head``: two first mids whose branch tails are
    swapped between them. Every node is bisimilar (inverse-augmented graph)
    to its true-cluster counterpart — same in-relation multiset shapes, tail
    multiplicity included — so conditioned states match the true tails'.
    Emission order mirrors the cluster's, keeping per-node message order
    aligned. Returns the confuser tails (T-relaxation answers for ``head``)."""
    m1, m2, b1, c1, b2, c2 = b.fresh(6)
    ys1 = b.fresh(tails)   # tails of (m1-branch-b, m2-branch-c)
    ys2 = b.fresh(tails)   # tails of (m2-branch-b, m1-branch-c)
    b.add_edge(head, 0, m1)
    b.add_edge(head, 0, m2)
    b.add_edge(m1, 1, b1)
    b.add_edge(m1, 3, c2)
    b.add_edge(m2, 1, b2)
    b.add_edge(m2, 3, c1)
    for y in ys1:
        b.add_edge(b1, 2, y)
    for y in ys1:
        b.add_edge(c1, 4, y)
    for y in ys2:
        b.add_edge(b2, 2, y)
    for y in ys2:
        b.add_edge(c2, 4, y)
    b.instance_entities.append({m1, m2, b1, c1, b2, c2} | set(ys1) | set(ys2))
    return ys1 + ys2


def _cluster_sequence(total_pairs: int, heads: int, tails: int) -> list[tuple[int, int]]:
    per = heads * tails
    full, rem = divmod(total_pairs, per)
    out = [(heads, tails)] * full
    if rem:
        rem_heads = heads if rem % heads == 0 else 1
        out.append((rem_heads, rem // rem_heads))
    return out


def _plant_structures(b: _Builder, plan: _Plan, num_pairs: int) -> list[int]:
    """Emit rule instances totalling exactly ``num_pairs`` supervised pairs.
    Returns cluster heads (shared family) for confuser attachment."""
    heads: list[int] = []
    if plan.family == "chain":
        for h, w in _cluster_sequence(num_pairs, plan.heads, plan.tails):
            _emit_chain_cluster(b, plan.chain_length, h, w)
    elif plan.family == "counted":
        for h, w in _cluster_sequence(num_pairs, plan.heads, plan.tails):
            _emit_counted_cluster(b, h, w, plan.count, supervised=True)
    elif plan.family == "two_split":
        for _ in range(num_pairs):
            _emit_split_pair(b)
    else:
        if num_pairs % plan.tails:
            raise GenerationError(
                f"shared-mid pair quota {num_pairs} not divisible by "
                f"cluster tail count {plan.tails}")
        for _ in range(num_pairs // plan.tails):
            heads.append(_emit_shared_cluster(b, plan.tails))
    return heads


def _coverage_with(edges: list[tuple[int, int, int]], num_entities: int,
                   num_relations: int, pattern: RulePattern) -> set[tuple[int, int]]:
    kg = KnowledgeGraph.from_triples(num_entities, num_relations, edges)
    return logic.coverage(kg, pattern)


def generate(config: SynthConfig) -> tuple[DatasetBundle, dict]:
    """Build one dataset; returns (bundle, manifest with embedded audit)."""
    plan = config.plan()
    pattern, target_rel = pattern_for(config.structure)
    num_relations = target_rel + 1
    rng = np.random.default_rng(config.seed)
    b = _Builder()

    total_pairs = sum(plan.splits)
    if plan.fresh_test:
        main_pairs = plan.splits[0] + plan.splits[1]
        heads = _plant_structures(b, plan, main_pairs)
        first_test_instance = len(b.instance_entities)
        first_test_pair = len(b.pairs)
        heads += _plant_structures(b, plan, plan.splits[2])
    else:
        heads = _plant_structures(b, plan, total_pairs)
        first_test_instance = None
        first_test_pair = None

    confuser_tails: dict[int, list[int]] = {}
    if plan.family == "two_shared" and plan.confusers:
        if plan.confusers > len(heads):
            raise GenerationError("more confusers than cluster heads")
        chosen = rng.choice(len(heads), size=plan.confusers, replace=False)
        for idx in sorted(int(i) for i in chosen):
            confuser_tails[heads[idx]] = _emit_confuser(b, heads[idx], plan.tails)

    if plan.family == "counted" and plan.decoys:
        for _ in range(plan.decoys):
            _emit_counted_cluster(b, plan.heads, plan.tails,
                                  max(plan.count - 1, 0), supervised=False)

    # noise: uniform (head, structure relation, tail) over the entity pool
    base_coverage = _coverage_with(b.edges, b.num_entities, num_relations, pattern)
    if set(b.pairs) != base_coverage:
        raise GenerationError(
            "planted structures do not match pattern coverage "
            f"({len(set(b.pairs))} planted vs {len(base_coverage)} covered)")
    rejected = 0
    added = 0
    while added < plan.noise:
        h = int(rng.integers(b.num_entities))
        t = int(rng.integers(b.num_entities))
        r = int(rng.integers(num_relations - 1))
        if (h, r, t) in b.edge_set:
            continue
        if config.noise_policy == "reject_coverage":
            kg_plus = KnowledgeGraph.from_triples(
                b.num_entities, num_relations, b.edges + [(h, r, t)])
            delta = logic.coverage_through_edge(kg_plus, pattern, h, r, t)
            if delta - base_coverage:
                rejected += 1
                if rejected > 50 * max(plan.noise, 1):
                    raise GenerationError("noise rejection budget exhausted")
                continue
        b.add_edge(h, r, t)
        added += 1

    # completion: any pair the pattern now covers joins the supervision set
    final_coverage = _coverage_with(b.edges, b.num_entities, num_relations,
                                    pattern)
    completed = sorted(final_coverage - set(b.pairs))

    # split assignment
    pair_arr = list(b.pairs)
    if plan.fresh_test:
        main = pair_arr[:first_test_pair]
        test_pairs = pair_arr[first_test_pair:]
        order = rng.permutation(len(main))
        train_pairs = [main[i] for i in order[:plan.splits[0]]]
        valid_pairs = [main[i] for i in order[plan.splits[0]:]]
        order_t = rng.permutation(len(test_pairs))
        test_pairs = [test_pairs[i] for i in order_t]
    else:
        order = rng.permutation(len(pair_arr))
        shuffled = [pair_arr[i] for i in order]
        n_train, n_valid, _ = plan.splits
        train_pairs = shuffled[:n_train]
        valid_pairs = shuffled[n_train:n_train + n_valid]
        test_pairs = shuffled[n_train + n_valid:]
    train_pairs.extend(completed)

    fact_graph = KnowledgeGraph.from_triples(b.num_entities, num_relations,
                                             b.edges)
    bundle = DatasetBundle(
        fact_graph=fact_graph,
        train=[Triple(x, target_rel, y) for x, y in train_pairs],
        valid=[Triple(x, target_rel, y) for x, y in valid_pairs],
        test=[Triple(x, target_rel, y) for x, y in test_pairs],
        entity_names=[f"e{i}" for i in range(b.num_entities)],
        relation_names=[f"r{i + 1}" for i in range(num_relations - 1)] + ["target"],
    )
    report = audit(bundle, config.structure,
                   first_test_instance=first_test_instance,
                   instance_entities=b.instance_entities,
                   confuser_tails=confuser_tails)
    manifest = {
        "config": config.to_json(),
        "plan": {"family": plan.family, "splits": list(plan.splits),
                 "noise": plan.noise, "confusers": plan.confusers,
                 "decoys": plan.decoys, "fresh_test": plan.fresh_test},
        "counts": {"known": len(b.edges), "train": len(bundle.train),
                   "valid": len(bundle.valid), "test": len(bundle.test),
                   "entities": b.num_entities, "relations": num_relations},
        "noise_rejected": rejected,
        "completed": len(completed),
        "audit": report.to_json(),
    }
    return bundle, manifest


def generate_label_variant(config: SynthConfig) -> tuple[DatasetBundle, dict]:
    if not config.structure.endswith("_label"):
        raise GenerationError("label variant generation needs a *_label structure")
    return generate(config)


@dataclass
class AuditReport:
    uncovered_positives: int
    coverage_extras: int
    target_leakage: int
    num_confuser_tails: int
    confuser_tails_covered: int       # must stay 0: confusers are non-answers
    label_disjoint: bool | None
    ok: bool

    def to_json(self) -> dict:
        return dict(self.__dict__)


def audit(bundle: DatasetBundle, structure: str,
          first_test_instance: int | None = None,
          instance_entities: list[set[int]] | None = None,
          confuser_tails: dict[int, list[int]] | None = None) -> AuditReport:
    """Post-generation validation: every positive covered, no target edges in
    the facts, confuser tails outside coverage, label variants entity-fresh."""
    pattern, target_rel = pattern_for(structure)
    kg = bundle.fact_graph
    cov = logic.coverage(kg, pattern)
    positives = {(h, t) for h, r, t in
                 (bundle.train + bundle.valid + bundle.test) if r == target_rel}
    uncovered = len(positives - cov)
    extras = len(cov - positives)
    leakage = int((kg.rels == target_rel).sum())

    confuser_covered = 0
    num_conf = 0
    if confuser_tails:
        for head, tails in confuser_tails.items():
            num_conf += len(tails)
            confuser_covered += sum((head, y) in cov for y in tails)

    disjoint: bool | None = None
    if first_test_instance is not None and instance_entities is not None:
        train_ents: set[int] = set()
        for ents in instance_entities[:first_test_instance]:
            train_ents |= ents
        test_ents: set[int] = set()
        for ents in instance_entities[first_test_instance:]:
            test_ents |= ents
        disjoint = not (train_ents & test_ents)

    ok = (uncovered == 0 and extras == 0 and leakage == 0
          and confuser_covered == 0 and disjoint is not False)
    return AuditReport(uncovered_positives=uncovered, coverage_extras=extras,
                       target_leakage=leakage, num_confuser_tails=num_conf,
                       confuser_tails_covered=confuser_covered,
                       label_disjoint=disjoint, ok=ok)
