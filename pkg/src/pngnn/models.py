"""Scoring models over conditioned message passing.

CgnnModel scores every candidate target from the final pairwise states.
PnGnnModel additionally pools states over the path-neighbor strata of
(source, candidate) and fuses the pooled summaries into the representation
fed to the scorer. With hop budget k + 1 the slots are every (i, j) with
i, j >= 1 and i + j <= k + 1, in lexicographic order; each slot runs through
its own MLP and the blocks are composed (concatenation by default, addition
as the configured alternative) with the final state.

Empty strata: a slot whose stratum for (u, v) is empty contributes an exact
zero block for v — the slot MLP's bias is gated off — so masking a slot whose
stratum is empty never changes the score, which is what makes the masked
ablation variants (single-slot and dropped-slot models) consistent with the
full model.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import cgnn, pn
from .autodiff import ParamStore, Tensor
from .cgnn import CgnnConfig, ConfigError, GraphRuntime

COMPOSE_MODES = ("concat", "add")


@dataclass
class PnConfig:
    hops: int = 2                      # strata (i, j) with i + j <= hops + 1
    pool: str = "sum"                  # sum | mean (batched trained path)
    compose: str = "concat"            # concat | add
    slots: list[list[int]] | None = None   # e.g. [[1, 2], [2, 1]]; None = all

    def validate(self) -> None:
        if self.hops < 1:
            raise ConfigError("pn.hops must be >= 1")
        if self.pool not in pn.BATCHED_POOL_MODES:
            raise ConfigError(
                f"trained pooling must be one of {pn.BATCHED_POOL_MODES}; "
                f"max/min exist only in the per-set reference op")
        if self.compose not in COMPOSE_MODES:
            raise ConfigError(f"pn.compose must be one of {COMPOSE_MODES}")
        allowed = set(pn.stratum_slots(self.hops + 1))
        for pair in self.active_slots():
            if pair not in allowed:
                raise ConfigError(f"slot {pair} outside hop budget {self.hops + 1}")

    def active_slots(self) -> list[tuple[int, int]]:
        if self.slots is None:
            return pn.stratum_slots(self.hops + 1)
        return [tuple(int(x) for x in pair) for pair in self.slots]

    def to_json(self) -> dict:
        return {"hops": self.hops, "pool": self.pool, "compose": self.compose,
                "slots": self.slots}

    @classmethod
    def from_json(cls, obj: dict) -> "PnConfig":
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def _slot_name(slot: tuple[int, int]) -> str:
    return f"pn.{slot[0]}.{slot[1]}"


def fuse_khop(store: ParamStore, summaries: list[tuple[Tensor, np.ndarray]],
              slots: list[tuple[int, int]], final: Tensor, dim: int,
              compose: str = "concat") -> Tensor:
    """Compose per-slot pooled summaries with the final-layer rows.

    ``summaries[s]`` is (pooled rows, member counts) for ``slots[s]``; rows
    with count zero are gated to exact zero after the slot MLP. Concat
    composition returns (rows, dim * (len(slots) + 1)); add composition sums
    the blocks into the final rows."""
    if len(summaries) != len(slots):
        raise ValueError("one summary per slot required")
    blocks: list[Tensor] = []
    for (pooled, counts), slot in zip(summaries, slots):
        out = ad.mlp_forward(store, _slot_name(slot), pooled, [dim, dim])
        gate = ad.constant((np.asarray(counts) > 0).astype(np.float64)
                           .reshape(-1, 1))
        blocks.append(ad.mul(out, gate))
    if compose == "concat":
        return ad.concat(blocks + [final], axis=-1)
    fused = final
    for block in blocks:
        fused = ad.add(fused, block)
    return fused


def fuse_2hop(store: ParamStore, summaries: list[tuple[Tensor, np.ndarray]],
              final: Tensor, dim: int, compose: str = "concat") -> Tensor:
    """Two-hop special case: exactly the slots (1,1), (1,2), (2,1)."""
    return fuse_khop(store, summaries, pn.stratum_slots(3), final, dim, compose)


class CgnnModel:
    """Score(u, q, v) = MLP(h^(L)_{v|u,q}) for every candidate v at once."""

    def __init__(self, config: CgnnConfig, store: ParamStore):
        config.validate()
        self.config = config
        self.store = store

    def states(self, runtime: GraphRuntime, u: int | None, q: int) -> list[Tensor]:
        return cgnn.run(self.store, self.config, runtime, u, q)

    def _score_rows(self, rows: Tensor, in_dim: int) -> Tensor:
        dim = self.config.hidden_dim
        out = ad.mlp_forward(self.store, "scorer", rows, [in_dim, dim, 1])
        return ad.reshape(out, (-1,))

    def score_all(self, runtime: GraphRuntime, u: int, q: int) -> Tensor:
        final = self.states(runtime, u, q)[-1]
        return self._score_rows(final, self.config.hidden_dim)


class PnGnnModel(CgnnModel):
    """CgnnModel plus pooled path-neighbor summaries fused before scoring."""

    def __init__(self, config: CgnnConfig, pn_config: PnConfig, store: ParamStore):
        super().__init__(config, store)
        pn_config.validate()
        self.pn_config = pn_config

    def summaries(self, runtime: GraphRuntime, u: int,
                  final: Tensor) -> list[tuple[Tensor, np.ndarray]]:
        """Batched (pooled, counts) per active slot, rows indexed by target."""
        budget = self.pn_config.hops + 1
        table = runtime.strata(budget - 1)
        dist_u = pn.distances_from(runtime.adjacency(), u, budget - 1)
        out: list[tuple[Tensor, np.ndarray]] = []
        for (i, j) in self.pn_config.active_slots():
            mask = (dist_u == i).astype(np.float64)
            counts = table.counts(j, mask)
            pooled = table.pooled(j, mask, final, self.pn_config.pool)
            out.append((pooled, counts))
        return out

    def score_all(self, runtime: GraphRuntime, u: int, q: int) -> Tensor:
        final = self.states(runtime, u, q)[-1]
        summaries = self.summaries(runtime, u, final)
        slots = self.pn_config.active_slots()
        dim = self.config.hidden_dim
        fused = fuse_khop(self.store, summaries, slots, final, dim,
                          self.pn_config.compose)
        in_dim = dim * (len(slots) + 1) if self.pn_config.compose == "concat" else dim
        return self._score_rows(fused, in_dim)


def build_model(model_name: str, config: CgnnConfig, pn_config: PnConfig | None,
                store: ParamStore):
    if model_name == "cgnn":
        return CgnnModel(config, store)
    if model_name == "pngnn":
        return PnGnnModel(config, pn_config or PnConfig(), store)
    raise ConfigError(f"unknown model {model_name!r} (expected cgnn or pngnn)")
