"""Conditional message passing: pairwise representations h_{v | u, q}.

The source entity u and query relation q condition the run through the
initial state (the query embedding planted at row u, zeros elsewhere), after
which L synchronous layers aggregate incoming messages

    h_v  <-  act( [h_v, AGG_{(w, r, v)} MSG(h_w, z_r)] W + b )

with MSG one of translate (h + z), multiply (h * z), rotate (2-D rotation of
coordinate pairs by per-relation angles), and AGG one of sum, mean, max, or
pna (concat of mean/max/min/std through a linear map, no degree scalers).
Messages flow along stored edge direction; reaching backward is the data
layer's job (inverse augmentation).

Determinism: edges are processed in destination-sorted order (stable, so
parallel edges keep file order), and every reduction is sequential, so equal
inputs give bit-equal outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import pn
from .autodiff import ParamStore, Tensor
from .kg import KnowledgeGraph

MESSAGES = ("translate", "multiply", "rotate")
AGGREGATORS = ("sum", "mean", "max", "pna")


class ConfigError(Exception):
    """Inconsistent model configuration."""


@dataclass
class CgnnConfig:
    num_layers: int = 6
    hidden_dim: int = 64
    message: str = "multiply"
    aggregator: str = "sum"
    activation: str = "relu"
    layer_norm: bool = False
    share_relation_embeddings: bool = False
    query_modulated_messages: bool = False

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.hidden_dim < 2:
            raise ConfigError("hidden_dim must be >= 2")
        if self.message not in MESSAGES:
            raise ConfigError(f"message must be one of {MESSAGES}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}")
        if self.message == "rotate" and self.hidden_dim % 2 != 0:
            raise ConfigError("rotate pairs coordinates: hidden_dim must be even")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {tuple(ad.ACTIVATIONS)}")
        if self.query_modulated_messages and self.message != "multiply":
            raise ConfigError("query-modulated messages only combine with "
                              "the multiply message function")

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "CgnnConfig":
        cfg = cls(**obj)
        cfg.validate()
        return cfg


class GraphRuntime:
    """Read-only per-graph tables shared by every conditioned run: edges in
    destination-sorted order, in-degree pointers, and lazy distance strata."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg
        self.num_entities = kg.num_entities
        self.num_relations = kg.num_relations
        order = np.argsort(kg.tails, kind="stable")
        self.src = np.ascontiguousarray(kg.heads[order])
        self.rel = np.ascontiguousarray(kg.rels[order])
        self.dst = np.ascontiguousarray(kg.tails[order])
        counts = np.bincount(self.dst, minlength=self.num_entities)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.in_degree = counts.astype(np.float64)
        self._adjacency = None
        self._strata: dict[int, pn.StrataTable] = {}

    def adjacency(self):
        if self._adjacency is None:
            self._adjacency = pn.adjacency(self.num_entities, self.kg.heads,
                                           self.kg.tails)
        return self._adjacency

    def strata(self, max_j: int) -> pn.StrataTable:
        if max_j not in self._strata:
            self._strata[max_j] = pn.StrataTable.build(self.adjacency(), max_j)
        return self._strata[max_j]


def relation_width(config: CgnnConfig) -> int:
    return config.hidden_dim // 2 if config.message == "rotate" else config.hidden_dim


def query_embedding(store: ParamStore, config: CgnnConfig, num_relations: int,
                    q: int) -> Tensor:
    table = store.get("query_emb", (num_relations, config.hidden_dim),
                      fan_in=config.hidden_dim)
    return ad.gather_rows(table, np.array([q], dtype=np.int64))


def relation_embeddings(store: ParamStore, config: CgnnConfig,
                        num_relations: int, layer: int) -> Tensor:
    name = "rel_emb" if config.share_relation_embeddings else f"rel_emb.{layer}"
    return store.get(name, (num_relations, relation_width(config)),
                     fan_in=config.hidden_dim)


def init_state(store: ParamStore, config: CgnnConfig, runtime: GraphRuntime,
               u: int | None, q: int) -> Tensor:
    """Indicator initialization: the query embedding at row u, zero elsewhere.
    ``u=None`` gives the all-zero no-source baseline used by locality tests."""
    if u is None:
        return ad.constant(np.zeros((runtime.num_entities, config.hidden_dim)))
    zq = query_embedding(store, config, runtime.num_relations, q)
    return ad.scatter_add_rows(zq, np.array([u], dtype=np.int64),
                               runtime.num_entities)


def _messages(config: CgnnConfig, runtime: GraphRuntime, h: Tensor,
              z: Tensor) -> Tensor:
    """Materialized per-edge messages in destination-sorted order (the path
    used by max/pna; sum/mean take the fused kernel instead)."""
    hs = ad.gather_rows(h, runtime.src)
    zr = ad.gather_rows(z, runtime.rel)
    if config.message == "translate":
        return ad.add(hs, zr)
    if config.message == "multiply":
        return ad.mul(hs, zr)
    return ad.rotate_pairs(hs, zr)


def aggregate(store: ParamStore, config: CgnnConfig, runtime: GraphRuntime,
              h: Tensor, z: Tensor, layer: int) -> Tensor:
    """AGG over each entity's incoming messages; no edges give the zero vector."""
    if config.aggregator in ("sum", "mean"):
        total = ad.relational_aggregate(h, z, runtime.src, runtime.rel,
                                        runtime.dst, runtime.num_entities,
                                        config.message)
        if config.aggregator == "sum":
            return total
        inv = 1.0 / np.maximum(runtime.in_degree, 1.0)
        return ad.mul(total, ad.constant(inv[:, None]))
    msgs = _messages(config, runtime, h, z)
    if config.aggregator == "max":
        return ad.segment_max(msgs, runtime.indptr)
    # pna: concat(mean, max, min, std) through a linear map, no degree scalers
    counts = np.maximum(runtime.in_degree, 1.0)[:, None]
    present = ad.constant((runtime.in_degree > 0).astype(np.float64)[:, None])
    s1 = ad.segment_sum(msgs, runtime.indptr)
    mean = ad.mul(s1, ad.constant(1.0 / counts))
    s2 = ad.segment_sum(ad.mul(msgs, msgs), runtime.indptr)
    ex2 = ad.mul(s2, ad.constant(1.0 / counts))
    var = ad.relu(ex2 - ad.mul(mean, mean))  # clamp float residue; grad of var
    # vanishes wherever the clamp can bind (all messages equal), so no kink
    std = ad.mul(ad.sqrt(var + ad.constant(1e-8)), present)
    mx = ad.segment_max(msgs, runtime.indptr)
    mn = ad.segment_min(msgs, runtime.indptr)
    stacked = ad.concat([mean, mx, mn, std], axis=-1)
    dim = config.hidden_dim
    w = store.get(f"pna.{layer}", (4 * dim, dim), fan_in=4 * dim)
    return ad.matmul(stacked, w)


def layer_step(store: ParamStore, config: CgnnConfig, runtime: GraphRuntime,
               h: Tensor, layer: int, zq: Tensor | None) -> Tensor:
    z = relation_embeddings(store, config, runtime.num_relations, layer)
    if config.query_modulated_messages:
        if zq is None:
            raise ConfigError("query-modulated messages need the query embedding")
        z = ad.mul(z, zq)
    agg = aggregate(store, config, runtime, h, z, layer)
    dim = config.hidden_dim
    w_self = store.get(f"update.{layer}.self", (dim, dim), fan_in=2 * dim)
    w_msg = store.get(f"update.{layer}.msg", (dim, dim), fan_in=2 * dim)
    b = store.get(f"update.{layer}.bias", (dim,), fan_in=2 * dim)
    pre = ad.add(ad.add(ad.matmul(h, w_self), ad.matmul(agg, w_msg)), b)
    if config.layer_norm:
        gain = store.get(f"update.{layer}.ln_gain", (dim,), init="ones")
        bias = store.get(f"update.{layer}.ln_bias", (dim,), init="zeros")
        pre = ad.layer_norm(pre, gain, bias)
    return ad.ACTIVATIONS[config.activation](pre)


def run(store: ParamStore, config: CgnnConfig, runtime: GraphRuntime,
        u: int | None, q: int) -> list[Tensor]:
    """All per-layer states h^(0..L) for one (u, q) conditioning."""
    config.validate()
    zq = query_embedding(store, config, runtime.num_relations, q) \
        if config.query_modulated_messages else None
    states = [init_state(store, config, runtime, u, q)]
    for layer in range(config.num_layers):
        states.append(layer_step(store, config, runtime, states[-1], layer, zq))
    return states
