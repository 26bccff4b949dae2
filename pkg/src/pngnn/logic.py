"""Counting modal logic over knowledge graphs: formulas, checking, rule patterns.

Formulas are unary: truth is evaluated at a single entity. The counting
quantifier ``ExistsAtLeast(n, rel, body)`` holds at ``v`` when at least ``n``
in-edges (w, rel, v) have a head satisfying ``body``, counted over the edge
multiset (parallel duplicates count separately, matching message
multiplicities in the engine). Quantification over outgoing edges is obtained
by querying the inverse relation on an augmented graph.

Two evaluation routes are kept deliberately independent: :func:`check` is a
naive single-entity recursion, :func:`check_all` a memoized bottom-up sweep.
Tests hold them against each other and against compiled GNN weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

import numpy as np

from .kg import KnowledgeGraph, neighbors


class FormulaError(Exception):
    """Malformed formula or formula/signature mismatch."""


class PatternError(Exception):
    """Malformed rule pattern or unsupported pattern operation."""


@dataclass(frozen=True)
class Top:
    def __str__(self):
        return "T"


@dataclass(frozen=True)
class Pred:
    pred: int

    def __str__(self):
        return f"P{self.pred}"


@dataclass(frozen=True)
class Not:
    body: "Formula"

    def __str__(self):
        return f"~({self.body})"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"

    def __str__(self):
        return f"({self.left} & {self.right})"


@dataclass(frozen=True)
class ExistsAtLeast:
    count: int
    rel: int
    body: "Formula"

    def __str__(self):
        return f"E>={self.count}[r{self.rel}]({self.body})"


Formula = Union[Top, Pred, Not, And, ExistsAtLeast]

# predicate -> set of entities where it holds
Valuation = Mapping[int, set]


@dataclass(frozen=True)
class Signature:
    num_relations: int
    num_predicates: int


def validate(formula: Formula, sig: Signature) -> None:
    """Raise FormulaError unless every index fits the signature."""
    if isinstance(formula, Top):
        return
    if isinstance(formula, Pred):
        if not (0 <= formula.pred < sig.num_predicates):
            raise FormulaError(f"predicate {formula.pred} outside signature")
        return
    if isinstance(formula, Not):
        validate(formula.body, sig)
        return
    if isinstance(formula, And):
        validate(formula.left, sig)
        validate(formula.right, sig)
        return
    if isinstance(formula, ExistsAtLeast):
        if formula.count < 1:
            raise FormulaError(f"counting threshold must be >= 1, got {formula.count}")
        if not (0 <= formula.rel < sig.num_relations):
            raise FormulaError(f"relation {formula.rel} outside signature")
        validate(formula.body, sig)
        return
    raise FormulaError(f"not a formula node: {formula!r}")


def depth(formula: Formula) -> int:
    """Nesting depth; atoms have depth 0."""
    if isinstance(formula, (Top, Pred)):
        return 0
    if isinstance(formula, Not):
        return 1 + depth(formula.body)
    if isinstance(formula, And):
        return 1 + max(depth(formula.left), depth(formula.right))
    return 1 + depth(formula.body)


def check(kg: KnowledgeGraph, formula: Formula, valuation: Valuation, entity: int) -> bool:
    """Evaluate ``formula`` at one entity by direct recursion.

    Deliberately naive (no sharing, no memoization); serves as the oracle the
    vectorized sweep and the compiled weights are tested against.
    """
    if isinstance(formula, Top):
        return True
    if isinstance(formula, Pred):
        return entity in valuation.get(formula.pred, ())
    if isinstance(formula, Not):
        return not check(kg, formula.body, valuation, entity)
    if isinstance(formula, And):
        return (check(kg, formula.left, valuation, entity)
                and check(kg, formula.right, valuation, entity))
    if isinstance(formula, ExistsAtLeast):
        hits = 0
        for w in neighbors(kg, entity, formula.rel, "in"):
            if check(kg, formula.body, valuation, int(w)):
                hits += 1
                if hits >= formula.count:
                    return True
        return False
    raise FormulaError(f"not a formula node: {formula!r}")


def check_all(kg: KnowledgeGraph, formula: Formula, valuation: Valuation) -> np.ndarray:
    """Satisfaction vector over all entities, each subformula evaluated once."""
    memo: dict[Formula, np.ndarray] = {}

    def run(f: Formula) -> np.ndarray:
        if f in memo:
            return memo[f]
        if isinstance(f, Top):
            out = np.ones(kg.num_entities, dtype=bool)
        elif isinstance(f, Pred):
            out = np.zeros(kg.num_entities, dtype=bool)
            members = list(valuation.get(f.pred, ()))
            if members:
                out[np.array(members, dtype=np.int64)] = True
        elif isinstance(f, Not):
            out = ~run(f.body)
        elif isinstance(f, And):
            out = run(f.left) & run(f.right)
        elif isinstance(f, ExistsAtLeast):
            body = run(f.body)
            mask = kg.rels == f.rel
            counts = np.bincount(kg.tails[mask],
                                 weights=body[kg.heads[mask]].astype(np.float64),
                                 minlength=kg.num_entities)
            out = counts >= f.count
        else:
            raise FormulaError(f"not a formula node: {f!r}")
        memo[f] = out
        return out

    return run(formula)


def random_formula(rng: np.random.Generator, sig: Signature,
                   max_depth: int = 4, max_count: int = 3) -> Formula:
    """Draw a random formula within the signature, depth, and count bounds."""
    if max_depth <= 0 or rng.random() < 0.25:
        if sig.num_predicates > 0 and rng.random() < 0.7:
            return Pred(int(rng.integers(sig.num_predicates)))
        return Top()
    kind = rng.choice(["not", "and", "exists", "exists"])
    if kind == "not":
        return Not(random_formula(rng, sig, max_depth - 1, max_count))
    if kind == "and":
        return And(random_formula(rng, sig, max_depth - 1, max_count),
                   random_formula(rng, sig, max_depth - 1, max_count))
    return ExistsAtLeast(int(rng.integers(1, max_count + 1)),
                         int(rng.integers(sig.num_relations)),
                         random_formula(rng, sig, max_depth - 1, max_count))


def to_json(formula: Formula) -> dict:
    if isinstance(formula, Top):
        return {"kind": "top"}
    if isinstance(formula, Pred):
        return {"kind": "pred", "pred": formula.pred}
    if isinstance(formula, Not):
        return {"kind": "not", "body": to_json(formula.body)}
    if isinstance(formula, And):
        return {"kind": "and", "left": to_json(formula.left),
                "right": to_json(formula.right)}
    if isinstance(formula, ExistsAtLeast):
        return {"kind": "exists", "n": formula.count, "rel": formula.rel,
                "body": to_json(formula.body)}
    raise FormulaError(f"not a formula node: {formula!r}")


def from_json(obj: dict) -> Formula:
    """Parse the nested-record format; accepts "or" as parser-level sugar."""
    if not isinstance(obj, dict) or "kind" not in obj:
        raise FormulaError(f"formula record must be an object with 'kind': {obj!r}")
    kind = obj["kind"]
    try:
        if kind == "top":
            return Top()
        if kind == "pred":
            return Pred(int(obj["pred"]))
        if kind == "not":
            return Not(from_json(obj["body"]))
        if kind == "and":
            return And(from_json(obj["left"]), from_json(obj["right"]))
        if kind == "or":
            # a or b == not(not a and not b); sugar only, never serialized
            return Not(And(Not(from_json(obj["left"])),
                           Not(from_json(obj["right"]))))
        if kind == "exists":
            return ExistsAtLeast(int(obj["n"]), int(obj["rel"]),
                                 from_json(obj["body"]))
    except KeyError as exc:
        raise FormulaError(f"formula record {kind!r} missing field {exc}") from None
    raise FormulaError(f"unknown formula kind {kind!r}")


def load_formula(path: str) -> Formula:
    with open(path, encoding="utf-8") as fh:
        return from_json(json.load(fh))


def save_formula(formula: Formula, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json(formula), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Rule patterns

Term = Union[str, int]  # str = variable, int = entity constant


@dataclass(frozen=True)
class PatternEdge:
    src: Term
    rel: int
    dst: Term


@dataclass(frozen=True)
class RulePattern:
    """A binary rule R(x, y) as an edge-labeled pattern graph.

    Variables are strings, constants are entity ids. ``distinct`` lists
    variable groups whose assignments must be pairwise different (used for
    counting side conditions); all other variables may collide, i.e. coverage
    is by homomorphism. ``family`` records which constructor built the
    pattern, which is what :func:`mark_source` dispatches on.
    """

    x: str
    y: str
    edges: tuple[PatternEdge, ...]
    distinct: tuple[tuple[Term, ...], ...] = ()
    family: str = "custom"

    def variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for v in (self.x, self.y):
            seen.setdefault(v)
        for e in self.edges:
            for t in (e.src, e.dst):
                if isinstance(t, str):
                    seen.setdefault(t)
        return list(seen)


def chain(length: int, relations: list[int] | None = None) -> RulePattern:
    """x -r1-> z1 -r2-> ... -rk-> y with fresh intermediates."""
    if length < 1:
        raise PatternError("chain length must be >= 1")
    rels = relations if relations is not None else list(range(length))
    if len(rels) != length:
        raise PatternError(f"chain of length {length} needs {length} relations")
    nodes = ["x"] + [f"z{i}" for i in range(1, length)] + ["y"]
    edges = tuple(PatternEdge(nodes[i], rels[i], nodes[i + 1]) for i in range(length))
    return RulePattern("x", "y", edges, family="chain")


def counted_chain(chain_relations: list[int], count: int, count_relation: int) -> RulePattern:
    """A 3-edge chain whose middle node needs >= count extra in-edges.

    Pattern: x -r1-> z1 -r2-> z2 -r3-> y with ``count`` satellites
    s_i -r4-> z2 required to be pairwise distinct.
    """
    if len(chain_relations) != 3:
        raise PatternError("counted_chain takes exactly 3 chain relations")
    if count < 1:
        raise PatternError("count must be >= 1")
    r1, r2, r3 = chain_relations
    edges = [PatternEdge("x", r1, "z1"), PatternEdge("z1", r2, "z2"),
             PatternEdge("z2", r3, "y")]
    sats = tuple(f"s{i}" for i in range(count))
    edges += [PatternEdge(s, count_relation, "z2") for s in sats]
    distinct = (sats,) if count > 1 else ()
    return RulePattern("x", "y", tuple(edges), distinct=distinct, family="counted_chain")


def two_chains(shared_mid: bool, relations: list[int] | None = None) -> RulePattern:
    """Two length-3 chains x..y with a common first relation.

    ``shared_mid=True`` forces both chains through one first intermediate
    (the harder, non-modal rule); ``False`` lets the intermediates float,
    which every shared-mid instance also satisfies.
    """
    rels = relations if relations is not None else [0, 1, 2, 3, 4]
    if len(rels) != 5:
        raise PatternError("two_chains takes 5 relations (shared first + 2 per branch)")
    r1, r2, r3, r4, r5 = rels
    if shared_mid:
        edges = (PatternEdge("x", r1, "a"),
                 PatternEdge("a", r2, "b"), PatternEdge("b", r3, "y"),
                 PatternEdge("a", r4, "c"), PatternEdge("c", r5, "y"))
        return RulePattern("x", "y", edges, family="two_chains_shared")
    edges = (PatternEdge("x", r1, "a1"),
             PatternEdge("a1", r2, "b"), PatternEdge("b", r3, "y"),
             PatternEdge("x", r1, "a2"),
             PatternEdge("a2", r4, "c"), PatternEdge("c", r5, "y"))
    return RulePattern("x", "y", edges, family="two_chains_split")


def substitute_constant(pattern: RulePattern, var: str, entity: int) -> RulePattern:
    """Bind one variable to a concrete entity; coverage can only shrink."""
    if var in (pattern.x, pattern.y):
        raise PatternError("cannot bind a distinguished variable")
    if var not in pattern.variables():
        raise PatternError(f"variable {var!r} not in pattern")
    edges = tuple(PatternEdge(entity if e.src == var else e.src, e.rel,
                              entity if e.dst == var else e.dst)
                  for e in pattern.edges)
    # the bound variable stays in its distinct groups as a constant, so the
    # remaining members must still differ from it (coverage may only shrink)
    distinct = tuple(tuple(entity if v == var else v for v in grp)
                     for grp in pattern.distinct)
    return replace(pattern, edges=edges, distinct=distinct)


def _match(kg: KnowledgeGraph, pattern: RulePattern,
           assignment: dict[str, int], order: list[str],
           out_pairs: set | None, pinned: dict[str, int] | None = None,
           stop_first: bool = False) -> bool:
    """Backtracking homomorphism search. Collects (x, y) pairs or stops early."""
    edges = pattern.edges

    def consistent(asg: dict[str, int]) -> bool:
        for e in edges:
            s = asg.get(e.src, e.src) if isinstance(e.src, str) else e.src
            t = asg.get(e.dst, e.dst) if isinstance(e.dst, str) else e.dst
            if isinstance(s, str) or isinstance(t, str):
                continue
            if t not in neighbors(kg, s, e.rel, "out"):
                return False
        for grp in pattern.distinct:
            vals = [asg[v] if isinstance(v, str) else v
                    for v in grp if not isinstance(v, str) or v in asg]
            if len(vals) != len(set(vals)):
                return False
        return True

    def extend(i: int) -> bool:
        if i == len(order):
            if out_pairs is not None:
                out_pairs.add((assignment[pattern.x], assignment[pattern.y]))
            return True
        var = order[i]
        if pinned and var in pinned:
            candidates = [pinned[var]]
        else:
            candidates = _candidates(kg, pattern, assignment, var)
        found = False
        for c in candidates:
            assignment[var] = c
            if consistent(assignment):
                if extend(i + 1):
                    found = True
                    if stop_first:
                        del assignment[var]
                        return True
            del assignment[var]
        return found

    return extend(0)


def _candidates(kg: KnowledgeGraph, pattern: RulePattern,
                assignment: dict[str, int], var: str):
    """Entities worth trying for ``var`` given edges touching assigned nodes."""
    best = None
    for e in pattern.edges:
        s = assignment.get(e.src) if isinstance(e.src, str) else e.src
        t = assignment.get(e.dst) if isinstance(e.dst, str) else e.dst
        if e.dst == var and s is not None:
            cand = set(int(w) for w in neighbors(kg, s, e.rel, "out"))
        elif e.src == var and t is not None:
            cand = set(int(w) for w in neighbors(kg, t, e.rel, "in"))
        else:
            continue
        best = cand if best is None else (best & cand)
        if not best:
            return []
    if best is None:
        return range(kg.num_entities)
    return sorted(best)


def _variable_order(pattern: RulePattern) -> list[str]:
    """Order variables so each (after the first) touches an earlier one."""
    variables = pattern.variables()
    adj = {v: set() for v in variables}
    for e in pattern.edges:
        if isinstance(e.src, str) and isinstance(e.dst, str):
            adj[e.src].add(e.dst)
            adj[e.dst].add(e.src)
    anchored = [v for v in variables
                if any(isinstance(e.src, int) and e.dst == v
                       or isinstance(e.dst, int) and e.src == v
                       for e in pattern.edges)]
    order: list[str] = []
    placed = set()
    queue = anchored + [pattern.x]
    while len(order) < len(variables):
        if not queue:
            queue = [v for v in variables if v not in placed][:1]
        v = queue.pop(0)
        if v in placed:
            continue
        order.append(v)
        placed.add(v)
        queue.extend(sorted(adj[v] - placed))
    return order


def coverage(kg: KnowledgeGraph, pattern: RulePattern) -> set[tuple[int, int]]:
    """All (x, y) pairs for which the pattern maps homomorphically into kg."""
    pairs: set[tuple[int, int]] = set()
    _match(kg, pattern, {}, _variable_order(pattern), pairs)
    return pairs


def covers_pair(kg: KnowledgeGraph, pattern: RulePattern, x: int, y: int) -> bool:
    """Does the pattern cover one specific pair? Early-exit search."""
    order = _variable_order(pattern)
    return _match(kg, pattern, {}, order, None,
                  pinned={pattern.x: x, pattern.y: y}, stop_first=True)


def coverage_through_edge(kg: KnowledgeGraph, pattern: RulePattern,
                          h: int, r: int, t: int) -> set[tuple[int, int]]:
    """Pairs covered by matches that map some pattern edge onto fact (h,r,t).

    ``kg`` must already contain the fact. Adding one fact to a graph can only
    newly cover pairs whose witnessing homomorphism uses that fact, and any
    such match sends a pattern edge with relation ``r`` onto it — so the
    difference between this set (on the extended graph) and the old coverage
    is exactly the coverage change. Far cheaper than re-enumerating coverage.
    """
    pairs: set[tuple[int, int]] = set()
    order = _variable_order(pattern)
    for e in pattern.edges:
        if e.rel != r:
            continue
        if e.src == e.dst and h != t:
            continue
        pins: dict[str, int] = {}
        if isinstance(e.src, str):
            pins[e.src] = h
        elif e.src != h:
            continue
        if isinstance(e.dst, str):
            pins[e.dst] = t
        elif e.dst != t:
            continue
        if e.src == e.dst:
            pins[e.src] = h
        _match(kg, pattern, {}, order, pairs, pinned=pins)
    return pairs


def mark_source(pattern: RulePattern, source_pred: int = 0) -> Formula:
    """Rewrite a rule as a unary formula with predicate ``source_pred`` at x.

    Supported families: chain, counted_chain, and split two_chains (the
    shared-mid variant has no counting-modal equivalent and raises).
    Evaluating the result with valuation {source_pred: {u}} is true exactly
    at the entities y with R(u, y).
    """
    if pattern.family == "two_chains_shared":
        raise PatternError("shared-mid two-chain rules are not expressible "
                           "as a unary counting-modal formula")

    def chain_formula(rels: list[int]) -> Formula:
        f: Formula = Pred(source_pred)
        for r in rels:
            f = ExistsAtLeast(1, r, f)
        return f

    if pattern.family == "chain":
        rels = [e.rel for e in pattern.edges]
        return chain_formula(rels)
    if pattern.family == "counted_chain":
        chain_edges = pattern.edges[:3]
        sats = pattern.edges[3:]
        r1, r2, r3 = (e.rel for e in chain_edges)
        n = len(sats)
        count_rel = sats[0].rel
        mid = And(ExistsAtLeast(1, r2, ExistsAtLeast(1, r1, Pred(source_pred))),
                  ExistsAtLeast(n, count_rel, Top()))
        return ExistsAtLeast(1, r3, mid)
    if pattern.family == "two_chains_split":
        r1 = pattern.edges[0].rel
        r2, r3 = pattern.edges[1].rel, pattern.edges[2].rel
        r4, r5 = pattern.edges[4].rel, pattern.edges[5].rel
        return And(chain_formula([r1, r2, r3]), chain_formula([r1, r4, r5]))
    raise PatternError(f"cannot mark source of pattern family {pattern.family!r}")


def pattern_to_json(pattern: RulePattern) -> dict:
    rec = {"x": pattern.x, "y": pattern.y,
           "edges": [{"src": e.src, "rel": e.rel, "dst": e.dst}
                     for e in pattern.edges]}
    if pattern.distinct:
        rec["distinct"] = [list(g) for g in pattern.distinct]
    if pattern.family != "custom":
        rec["family"] = pattern.family
    return rec


def pattern_from_json(obj: dict) -> RulePattern:
    try:
        edges = tuple(PatternEdge(e["src"], int(e["rel"]), e["dst"])
                      for e in obj["edges"])
        return RulePattern(obj["x"], obj["y"], edges,
                           distinct=tuple(tuple(g) for g in obj.get("distinct", [])),
                           family=obj.get("family", "custom"))
    except (KeyError, TypeError) as exc:
        raise PatternError(f"malformed pattern record: {exc}") from None
