"""Compile counting formulas into exact message-passing weights.

Each structurally distinct subformula gets one state slot (children before
parents, so the root is the last slot). One synchronous update per iteration,

    H  <-  clip(H @ C  +  sum_r  S_r @ H @ A_r  +  b,  0, 1),

with S_r[v, w] = multiplicity of edge (w, r, v), reproduces the one-step
truth-table of every connective:

    slot for Top               b = 1
    slot for Pred(i)           C[slot, slot] = 1        (holds the seeded bit)
    slot for Not(k)            C[k, slot] = -1,  b = 1
    slot for And(j, k), j != k C[j, slot] = C[k, slot] = 1,  b = -1
    slot for And(j, j)         C[j, slot] = 1            (copy; keeps the
                               coefficient alphabet {-1, 0, 1} and b in
                               {-1, 0, 1} united with {1 - n})
    slot for >=n r. k          A_r[k, slot] = 1,  b = 1 - n

All states stay exactly in {0, 1}: the pre-activations are small-integer
sums, exact in float64. A slot is correct once the iteration count reaches
its formula's connective depth, so running num_slots iterations (an upper
bound on depth) fixes every slot regardless of graph cycles, and one more
iteration changes nothing.

The second half of the module builds the paired fixtures where this bound
bites: two graphs a conditional message passer provably cannot tell apart at
the target, plus the path-neighbor readout that separates them.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from . import pn
from .kg import KnowledgeGraph
from .logic import (And, ExistsAtLeast, Formula, Not, Pred, Signature, Top,
                    Valuation, from_json as formula_from_json,
                    to_json as formula_to_json, validate)


class CompileError(Exception):
    """Formula cannot be compiled against the given signature."""


def _children(f: Formula) -> tuple[Formula, ...]:
    if isinstance(f, Not):
        return (f.body,)
    if isinstance(f, And):
        return (f.left, f.right)
    if isinstance(f, ExistsAtLeast):
        return (f.body,)
    return ()


def decompose(formula: Formula) -> tuple[list[Formula], dict[Formula, int]]:
    """Postorder slot assignment with structural sharing: each distinct
    subformula appears once, after all of its children; the root is last."""
    slots: list[Formula] = []
    index: dict[Formula, int] = {}

    def visit(f: Formula) -> int:
        if f in index:
            return index[f]
        for child in _children(f):
            visit(child)
        index[f] = len(slots)
        slots.append(f)
        return index[f]

    visit(formula)
    return slots, index


@dataclass
class CompiledGnn:
    """Exact weights for one formula: slot-combination matrix ``comb``,
    per-relation aggregation matrices ``agg`` (only relations that occur),
    bias ``bias``; ``slots`` keeps the per-slot subformulas for auditing."""

    num_relations: int
    num_predicates: int
    slots: list[Formula]
    comb: np.ndarray                      # (L, L)
    agg: dict[int, np.ndarray]            # rel -> (L, L)
    bias: np.ndarray                      # (L,)

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def output_slot(self) -> int:
        return len(self.slots) - 1

    def slot_of(self, sub: Formula) -> int:
        return self.slots.index(sub)

    def to_json(self) -> dict:
        return {
            "num_relations": self.num_relations,
            "num_predicates": self.num_predicates,
            "slots": [formula_to_json(f) for f in self.slots],
            "comb": self.comb.tolist(),
            "agg": {str(r): m.tolist() for r, m in sorted(self.agg.items())},
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CompiledGnn":
        return cls(
            num_relations=int(obj["num_relations"]),
            num_predicates=int(obj["num_predicates"]),
            slots=[formula_from_json(s) for s in obj["slots"]],
            comb=np.asarray(obj["comb"], dtype=np.float64),
            agg={int(r): np.asarray(m, dtype=np.float64)
                 for r, m in obj["agg"].items()},
            bias=np.asarray(obj["bias"], dtype=np.float64),
        )


def compile_formula(formula: Formula, sig: Signature) -> CompiledGnn:
    validate(formula, sig)
    slots, index = decompose(formula)
    num = len(slots)
    comb = np.zeros((num, num), dtype=np.float64)
    bias = np.zeros(num, dtype=np.float64)
    agg: dict[int, np.ndarray] = {}
    for pos, f in enumerate(slots):
        if isinstance(f, Top):
            bias[pos] = 1.0
        elif isinstance(f, Pred):
            comb[pos, pos] = 1.0
        elif isinstance(f, Not):
            comb[index[f.body], pos] = -1.0
            bias[pos] = 1.0
        elif isinstance(f, And):
            j, k = index[f.left], index[f.right]
            if j == k:
                comb[j, pos] = 1.0
            else:
                comb[j, pos] = 1.0
                comb[k, pos] = 1.0
                bias[pos] = -1.0
        elif isinstance(f, ExistsAtLeast):
            mat = agg.setdefault(f.rel, np.zeros((num, num), dtype=np.float64))
            mat[index[f.body], pos] = 1.0
            bias[pos] = 1.0 - f.count
        else:
            raise CompileError(f"unsupported node {type(f).__name__}")
    return CompiledGnn(num_relations=sig.num_relations,
                       num_predicates=sig.num_predicates,
                       slots=slots, comb=comb, agg=agg, bias=bias)


def relation_matrix(kg: KnowledgeGraph, rel: int) -> sp.csr_matrix:
    """S_r[v, w] = number of (w, r, v) edges (multiset counting)."""
    mask = kg.rels == rel
    data = np.ones(int(mask.sum()), dtype=np.float64)
    return sp.csr_matrix((data, (kg.tails[mask], kg.heads[mask])),
                         shape=(kg.num_entities, kg.num_entities))


def initial_state(compiled: CompiledGnn, kg: KnowledgeGraph,
                  valuation: Valuation) -> np.ndarray:
    state = np.zeros((kg.num_entities, compiled.num_slots), dtype=np.float64)
    for pos, f in enumerate(compiled.slots):
        if isinstance(f, Pred):
            members = list(valuation.get(f.pred, ()))
            state[members, pos] = 1.0
    return state


def forward_discrete(compiled: CompiledGnn, kg: KnowledgeGraph,
                     valuation: Valuation, num_iters: int | None = None) -> np.ndarray:
    """Run the compiled update to convergence; every entry stays in {0, 1}."""
    if kg.num_relations < max(compiled.agg, default=-1) + 1:
        raise CompileError("graph has fewer relations than the compiled weights use")
    state = initial_state(compiled, kg, valuation)
    rel_mats = {r: relation_matrix(kg, r) for r in compiled.agg}
    iters = compiled.num_slots if num_iters is None else num_iters
    for _ in range(iters):
        pre = state @ compiled.comb + compiled.bias
        for r, mat in compiled.agg.items():
            pre += rel_mats[r] @ state @ compiled.agg[r]
        state = np.clip(pre, 0.0, 1.0)
        if not np.isin(state, (0.0, 1.0)).all():
            raise AssertionError("compiled state left {0,1}")
    return state


@dataclass
class VerifyReport:
    ok: bool
    num_slots: int
    num_entities: int
    mismatches: list[tuple[int, int]] = dc_field(default_factory=list)  # (slot, entity)
    idempotent: bool = True


def verify_compiled(compiled: CompiledGnn, kg: KnowledgeGraph,
                    valuation: Valuation) -> VerifyReport:
    """Check every slot column against the reference model checker and confirm
    the state is a fixed point after num_slots iterations."""
    from .logic import check_all

    state = forward_discrete(compiled, kg, valuation)
    one_more = forward_discrete(compiled, kg, valuation,
                                num_iters=compiled.num_slots + 1)
    mismatches: list[tuple[int, int]] = []
    for pos, f in enumerate(compiled.slots):
        expected = check_all(kg, f, valuation).astype(np.float64)
        bad = np.flatnonzero(state[:, pos] != expected)
        mismatches.extend((pos, int(v)) for v in bad)
    idem = bool(np.array_equal(state, one_more))
    return VerifyReport(ok=not mismatches and idem,
                        num_slots=compiled.num_slots,
                        num_entities=kg.num_entities,
                        mismatches=mismatches, idempotent=idem)


# ---------------------------------------------------------------------------
# paired fixtures: shared-prefix chain pair vs split-prefix chain pair

SOURCE_PREDICATE = 0


def shared_prefix_chain_pair(k: int) -> tuple[Formula, Formula, Formula]:
    """Two k+1-hop chain formulas that share their innermost hop
    (>=1 r_0. P_0): returns (base, chain_a, chain_b) where base is their
    conjunction. The shared innermost subformula is the count probe the
    separator reads."""
    if k < 1:
        raise ValueError("k must be >= 1")
    first = ExistsAtLeast(1, 0, Pred(SOURCE_PREDICATE))
    chain_a: Formula = first
    for r in range(1, k + 1):
        chain_a = ExistsAtLeast(1, r, chain_a)
    chain_b: Formula = first
    for r in range(k + 1, 2 * k + 1):
        chain_b = ExistsAtLeast(1, r, chain_b)
    return And(chain_a, chain_b), chain_a, chain_b


@dataclass
class CounterexamplePair:
    """Two graphs over the same entity/relation vocabulary whose target node
    satisfies the same conjunction of two chains, but with the first hop
    shared in one and split in the other.

    Conditioned message passing sees identical unravelings at the target, so
    its representation of (source, target) is the same bit for bit. The
    (1, k) path-neighbor stratum has one member in the shared graph and two
    in the split graph, which is exactly what the separator reads.
    """

    k: int
    shared: KnowledgeGraph
    split: KnowledgeGraph
    source: int
    target: int

    @property
    def valuation(self) -> dict[int, set]:
        return {SOURCE_PREDICATE: {self.source}}


def khop_counterexample(k: int) -> CounterexamplePair:
    """Build the paired fixtures for chain length k + 1 (k >= 1).

    Node layout (both graphs use 2k + 2 entities and 2k + 1 relations):
    0 = source, 1 = first mid (shared graph) or first mid of chain A (split),
    2..k = remaining chain-A mids, k+1..2k-1 = chain-B mids, 2k = target,
    2k+1 = padding (shared graph) or the separate first mid of chain B
    (split graph). Edge lists are emitted chain A first, then chain B, so the
    target's two in-edges arrive in the same order in both graphs and the
    per-node message sums accumulate identically.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    num_entities = 2 * k + 2
    num_relations = 2 * k + 1
    source, target, extra = 0, 2 * k, 2 * k + 1

    def chain_a() -> list[tuple[int, int, int]]:
        edges = [(source, 0, 1)]
        for i in range(1, k):
            edges.append((i, i, i + 1))
        edges.append((k, k, target))
        return edges

    def chain_b(first_mid: int) -> list[tuple[int, int, int]]:
        edges = [(source, 0, first_mid)]
        prev = first_mid
        for step, node in enumerate(range(k + 1, 2 * k), start=1):
            edges.append((prev, k + step, node))
            prev = node
        edges.append((prev, 2 * k, target))
        return edges

    shared_edges = chain_a() + chain_b(1)[1:]   # first hop coincides with chain A's
    split_edges = chain_a() + chain_b(extra)
    shared = KnowledgeGraph.from_triples(num_entities, num_relations, shared_edges)
    split = KnowledgeGraph.from_triples(num_entities, num_relations, split_edges)
    return CounterexamplePair(k=k, shared=shared, split=split,
                              source=source, target=target)


# ---------------------------------------------------------------------------
# path-neighbor readout over compiled states

@dataclass
class PnReadout:
    """Correction applied on top of a compiled state at the target:

        readout(v) = clip(H[v] + sum_nonempty pooled_ij @ mats[(i, j)]
                               + (bias if any in-budget stratum nonempty),
                          0, 1)

    pooled_ij is the sum of H rows over stratum (i, j) of (source, v). Empty
    strata contribute nothing, and when every stratum in the budget is empty
    the readout reduces to the base state."""

    hop_budget: int
    mats: dict[tuple[int, int], np.ndarray]
    bias: np.ndarray

    def to_json(self) -> dict:
        return {
            "hop_budget": self.hop_budget,
            "mats": {f"{i},{j}": m.tolist() for (i, j), m in sorted(self.mats.items())},
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PnReadout":
        mats = {}
        for key, m in obj["mats"].items():
            i, j = key.split(",")
            mats[(int(i), int(j))] = np.asarray(m, dtype=np.float64)
        return cls(hop_budget=int(obj["hop_budget"]), mats=mats,
                   bias=np.asarray(obj["bias"], dtype=np.float64))


def pn_readout(readout: PnReadout, kg: KnowledgeGraph, state: np.ndarray,
               source: int, target: int) -> np.ndarray:
    """Apply the path-neighbor correction at one (source, target) pair."""
    adj = pn.adjacency(kg.num_entities, kg.heads, kg.tails)
    acc = state[target].copy()
    any_nonempty = False
    for slot in pn.stratum_slots(readout.hop_budget):
        members = pn.stratum_members(adj, source, target, slot[0], slot[1])
        if len(members) == 0:
            continue
        any_nonempty = True
        mat = readout.mats.get(slot)
        if mat is not None:
            acc += state[members].sum(axis=0) @ mat
    if any_nonempty:
        acc += readout.bias
    return np.clip(acc, 0.0, 1.0)


def compile_pn_separator(k: int) -> tuple[CompiledGnn, PnReadout, Formula]:
    """Compile the two-chain conjunction for hop count k + 1 together with the
    readout that distinguishes a shared first hop from a split one.

    The shared innermost subformula (>=1 r_0. P_0) occupies one slot; its
    pooled value over the (1, k) stratum counts first mids that took the
    r_0 hop from the source: 1 in the shared graph, 2 in the split graph.
    With weight -1 into the root slot and bias +1 the readout keeps the root
    bit in the shared graph and extinguishes it in the split graph."""
    base, chain_a, _chain_b = shared_prefix_chain_pair(k)
    sig = Signature(num_relations=2 * k + 1, num_predicates=1)
    compiled = compile_formula(base, sig)
    count_slot = compiled.slot_of(ExistsAtLeast(1, 0, Pred(SOURCE_PREDICATE)))
    num = compiled.num_slots
    mat = np.zeros((num, num), dtype=np.float64)
    mat[count_slot, compiled.output_slot] = -1.0
    bias = np.zeros(num, dtype=np.float64)
    bias[compiled.output_slot] = 1.0
    readout = PnReadout(hop_budget=k + 1, mats={(1, k): mat}, bias=bias)
    return compiled, readout, base
