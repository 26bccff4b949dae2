"""Training and evaluation: sampled negatives, NLL loss, early stopping on
validation MRR, filtered ranking metrics.

Every supervision triple (h, q, t) is used in both query directions — tail
(h, q, ?) and head (t, q + R0, ?) through the inverse relation id — so the
query count is exactly twice the triple count when inverses are augmented.
Negative answers are drawn uniformly over entities, excluding everything
known true in facts + train; evaluation filters against facts + all splits
(standard filtered protocol), with ties ranked at their mean position.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import kg as kg_mod
from .autodiff import ParamStore, Tensor
from .cgnn import CgnnConfig, ConfigError, GraphRuntime
from .kg import DatasetBundle, Triple
from .models import PnConfig, build_model


class TrainError(Exception):
    """Training aborted (non-finite loss, impossible sampling, bad config)."""


class CompatibilityError(Exception):
    """Checkpoint and dataset disagree on vocabulary or architecture."""


@dataclass
class TrainConfig:
    model: str = "pngnn"
    cgnn: CgnnConfig = dc_field(default_factory=CgnnConfig)
    pn: PnConfig = dc_field(default_factory=PnConfig)
    num_negatives: int = 32
    batch_size: int = 40
    learning_rate: float = 5e-3
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    augment_inverses: bool = True
    queries_per_epoch: int | None = None
    eval_negatives: int | None = None   # None ranks against every entity
    data: str | None = None

    def validate(self) -> None:
        if self.model not in ("cgnn", "pngnn"):
            raise ConfigError("model must be cgnn or pngnn")
        if self.num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.cgnn.validate()
        self.pn.validate()

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "cgnn": self.cgnn.to_json(),
            "pn": self.pn.to_json(),
            "num_negatives": self.num_negatives,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "patience": self.patience,
            "seed": self.seed,
            "augment_inverses": self.augment_inverses,
            "queries_per_epoch": self.queries_per_epoch,
            "eval_negatives": self.eval_negatives,
            "data": self.data,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        cgnn_cfg = CgnnConfig.from_json(obj.pop("cgnn", {}))
        pn_cfg = PnConfig.from_json(obj.pop("pn", {}))
        cfg = cls(cgnn=cgnn_cfg, pn=pn_cfg, **obj)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class Query:
    source: int
    rel: int            # query relation id (inverse ids live above R0)
    answer: int
    direction: str      # "tail" | "head"


def enumerate_queries(triples: list[Triple], num_base_relations: int,
                      both_directions: bool) -> list[Query]:
    out: list[Query] = []
    for h, r, t in triples:
        out.append(Query(h, r, t, "tail"))
        if both_directions:
            out.append(Query(t, r + num_base_relations, h, "head"))
    return out


def answer_sets(triple_groups: list[list[Triple]], num_base_relations: int,
                both_directions: bool) -> dict[tuple[int, int], set[int]]:
    """Known-true answers per (source, query relation)."""
    known: dict[tuple[int, int], set[int]] = {}
    for group in triple_groups:
        for h, r, t in group:
            known.setdefault((h, r), set()).add(t)
            if both_directions:
                known.setdefault((t, r + num_base_relations), set()).add(h)
    return known


def sample_negative_answers(rng: np.random.Generator, num_entities: int,
                            exclude: set[int], n: int) -> np.ndarray:
    """n uniform draws over entities outside ``exclude``."""
    if num_entities - len(exclude) < 1:
        raise TrainError("no valid negative exists: every entity is a known answer")
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        draw = rng.integers(0, num_entities, size=max(2 * (n - filled), 8))
        good = draw[~np.isin(draw, list(exclude))]
        take = min(len(good), n - filled)
        out[filled:filled + take] = good[:take]
        filled += take
    return out


def sample_negatives(bundle: DatasetBundle, positive: Triple, n: int,
                     rng: np.random.Generator, direction: str = "tail") -> list[Triple]:
    """Corrupt one side of ``positive`` with entities that do not reproduce a
    triple known true in facts or train."""
    if n < 1:
        raise TrainError("n must be >= 1")
    r0 = bundle.fact_graph.num_base_relations
    known = answer_sets([list(bundle.fact_graph.triples()), bundle.train],
                        r0, both_directions=True)
    h, r, t = positive
    if direction == "tail":
        exclude = known.get((h, r), set())
        tails = sample_negative_answers(rng, bundle.num_entities, exclude, n)
        return [Triple(h, r, int(x)) for x in tails]
    if direction == "head":
        exclude = known.get((t, r + r0), set())
        heads = sample_negative_answers(rng, bundle.num_entities, exclude, n)
        return [Triple(int(x), r, t) for x in heads]
    raise TrainError(f"direction must be head or tail, got {direction!r}")


def nll_loss(pos_logit: Tensor, neg_logits: Tensor) -> Tensor:
    """-log sigma(pos) - (1/n) * sum_i log(1 - sigma(neg_i)), stabilized via
    log(1 - sigma(x)) = logsigmoid(-x)."""
    n = neg_logits.data.size
    if n < 1:
        raise TrainError("nll_loss needs at least one negative")
    pos_term = -ad.tsum(ad.logsigmoid(pos_logit))
    neg_term = ad.mul(ad.tsum(ad.logsigmoid(-neg_logits)), ad.constant(-1.0 / n))
    return ad.add(pos_term, neg_term)


def _pick(scores: Tensor, idx: np.ndarray) -> Tensor:
    return ad.reshape(ad.gather_rows(ad.reshape(scores, (-1, 1)), idx), (-1,))


# ---------------------------------------------------------------------------
# ranking

class FilterError(Exception):
    """The true answer was itself in the filter set."""


def rank_query(scores: np.ndarray, target: int, filter_out) -> float:
    """Filtered rank with mean-position ties:
    1 + #strictly greater + 0.5 * #equal among the other candidates."""
    keep = np.ones(len(scores), dtype=bool)
    filt = list(filter_out)
    if filt:
        keep[filt] = False
    if not keep[target]:
        raise FilterError("true answer is in the filter set")
    t_score = scores[target]
    kept = scores[keep]
    greater = int((kept > t_score).sum())
    ties = int((kept == t_score).sum()) - 1
    return 1.0 + greater + 0.5 * ties


def metrics(ranks: list[float]) -> dict:
    if not ranks:
        raise ValueError("metrics need at least one rank")
    arr = np.asarray(ranks, dtype=np.float64)
    return {
        "mr": float(arr.mean()),
        "mrr": float((1.0 / arr).mean()),
        "hits1": float((arr <= 1).mean()),
        "hits3": float((arr <= 3).mean()),
        "hits10": float((arr <= 10).mean()),
    }


def evaluate(model, runtime: GraphRuntime, triples: list[Triple],
             num_base_relations: int, known: dict[tuple[int, int], set[int]],
             split: str, both_directions: bool = True,
             num_negatives: int | None = None,
             rng: np.random.Generator | None = None) -> tuple[dict, list[tuple]]:
    """Metrics record plus per-query rows (direction, source, rel, answer, rank).

    ``num_negatives=None`` ranks the answer against every unfiltered entity;
    an integer ranks it against that many sampled unknown-answer candidates
    (the restricted protocol some inductive suites report)."""
    if not triples:
        raise ValueError(f"split {split!r} is empty")
    queries = enumerate_queries(triples, num_base_relations, both_directions)
    if num_negatives is not None and rng is None:
        rng = np.random.default_rng(0)
    ranks: list[float] = []
    rows: list[tuple] = []
    for query in queries:
        scores = model.score_all(runtime, query.source, query.rel).data
        true_set = known.get((query.source, query.rel), {query.answer})
        if num_negatives is None:
            filter_out = true_set - {query.answer}
            rank = rank_query(scores, query.answer, filter_out)
        else:
            cand = sample_negative_answers(rng, runtime.num_entities,
                                           true_set, num_negatives)
            cand = np.concatenate([[query.answer], cand])
            rank = rank_query(scores[cand], 0, ())
        ranks.append(rank)
        rows.append((query.direction, query.source, query.rel,
                     query.answer, rank))
    record = {"split": split, **metrics(ranks), "num_queries": len(ranks)}
    return record, rows


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    checkpoint_path: str
    best_epoch: int
    best_valid_mrr: float
    history: list[dict]


def _build_runtime(bundle: DatasetBundle, augment: bool) -> GraphRuntime:
    fact = bundle.fact_graph
    if augment:
        fact = kg_mod.augment_inverses(fact)
    return GraphRuntime(fact)


def train(config: TrainConfig, bundle: DatasetBundle, out_dir: str,
          log=None) -> TrainResult:
    config.validate()
    say = log if log is not None else (lambda _msg: None)
    rng = np.random.default_rng(config.seed)
    store = ParamStore.seeded(config.seed)
    runtime = _build_runtime(bundle, config.augment_inverses)
    model = build_model(config.model, config.cgnn, config.pn, store)
    r0 = bundle.fact_graph.num_base_relations

    train_queries = enumerate_queries(bundle.train, r0, config.augment_inverses)
    if not train_queries:
        raise TrainError("train split is empty")
    fact_triples = list(bundle.fact_graph.triples())
    known_train = answer_sets([fact_triples, bundle.train], r0,
                              config.augment_inverses)
    known_eval = answer_sets(
        [fact_triples, bundle.train, bundle.valid, bundle.test], r0,
        config.augment_inverses)

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    meta = {
        "train_config": config.to_json(),
        "num_relations": runtime.num_relations,
        "num_base_relations": r0,
        "num_entities": runtime.num_entities,
        "best_epoch": -1,
        "best_valid_mrr": float("-inf"),
    }
    best_mrr = float("-inf")
    best_epoch = -1
    stale = 0
    history: list[dict] = []

    for epoch in range(config.epochs):
        t0 = time.time()
        perm = rng.permutation(len(train_queries))
        if config.queries_per_epoch is not None:
            perm = perm[:config.queries_per_epoch]
        epoch_loss = 0.0
        num_batches = 0
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start:start + config.batch_size]
            store.zero_grad()
            losses = []
            for qi in batch:
                query = train_queries[qi]
                scores = model.score_all(runtime, query.source, query.rel)
                exclude = known_train.get((query.source, query.rel),
                                          {query.answer})
                negs = sample_negative_answers(rng, runtime.num_entities,
                                               exclude, config.num_negatives)
                pos = _pick(scores, np.array([query.answer], dtype=np.int64))
                neg = _pick(scores, negs)
                losses.append(nll_loss(pos, neg))
            total = losses[0]
            for extra in losses[1:]:
                total = ad.add(total, extra)
            total = ad.mul(total, ad.constant(1.0 / len(losses)))
            if not np.isfinite(total.data):
                raise TrainError(
                    f"non-finite loss at epoch {epoch}, batch {num_batches}")
            total.backward()
            store.adam_step(config.learning_rate)
            epoch_loss += float(total.data)
            num_batches += 1
        mean_loss = epoch_loss / max(num_batches, 1)

        if bundle.valid:
            record, _rows = evaluate(
                model, runtime, bundle.valid, r0, known_eval, "valid",
                both_directions=config.augment_inverses,
                num_negatives=config.eval_negatives,
                rng=np.random.default_rng(config.seed + 7919))
            valid_mrr = record["mrr"]
        else:
            valid_mrr = -mean_loss  # no valid split: keep the lowest-loss epoch
        improved = valid_mrr > best_mrr
        if valid_mrr >= best_mrr:
            best_mrr = valid_mrr
            best_epoch = epoch
            meta["best_epoch"] = epoch
            meta["best_valid_mrr"] = best_mrr
            ad.save_checkpoint(ckpt_path, store, meta)
        stale = 0 if improved else stale + 1
        history.append({"epoch": epoch, "loss": mean_loss,
                        "valid_mrr": valid_mrr,
                        "seconds": round(time.time() - t0, 2)})
        say(f"epoch {epoch}: loss {mean_loss:.4f} valid_mrr {valid_mrr:.4f} "
            f"({history[-1]['seconds']}s)")
        if stale >= config.patience:
            break

    if best_epoch < 0:
        ad.save_checkpoint(ckpt_path, store, meta)
    return TrainResult(checkpoint_path=ckpt_path, best_epoch=best_epoch,
                       best_valid_mrr=best_mrr, history=history)


def load_model(ckpt_path: str):
    """Rebuild (model, config, meta) from a checkpoint."""
    store, meta = ad.load_checkpoint(ckpt_path)
    config = TrainConfig.from_json(meta["train_config"])
    model = build_model(config.model, config.cgnn, config.pn, store)
    return model, config, meta


def evaluate_checkpoint(ckpt_path: str, bundle: DatasetBundle, split: str,
                        num_negatives: int | None = None,
                        seed: int = 0) -> tuple[dict, list[tuple]]:
    model, config, meta = load_model(ckpt_path)
    runtime = _build_runtime(bundle, config.augment_inverses)
    if runtime.num_relations != meta["num_relations"]:
        raise CompatibilityError(
            f"checkpoint was trained with {meta['num_relations']} relations, "
            f"dataset has {runtime.num_relations}")
    r0 = bundle.fact_graph.num_base_relations
    known = answer_sets(
        [list(bundle.fact_graph.triples()), bundle.train, bundle.valid,
         bundle.test], r0, config.augment_inverses)
    triples = {"train": bundle.train, "valid": bundle.valid,
               "test": bundle.test}[split]
    return evaluate(model, runtime, triples, r0, known, split,
                    both_directions=config.augment_inverses,
                    num_negatives=num_negatives,
                    rng=np.random.default_rng(seed + 7919))
