"""Path-neighbor strata for pair-conditioned scoring.

For a query pair (u, v), stratum (i, j) is the set of nodes w lying on short
directed walks u -> w -> v at exact hop distances d(u, w) = i and d(w, v) = j.
Distances are relation-agnostic directed hop counts over the same edge set the
message passing runs on (so they see inverse edges exactly when the model
does). Slots are enumerated for i, j >= 1 with i + j <= hop_budget, in
lexicographic order.

Two routes are provided on purpose: a per-pair reference (explicit BFS set
intersection and row pooling) and a batched route (precomputed exact-distance
sparse matrices, one sparse matmul per slot for all candidate targets at
once). Tests hold them against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

POOL_MODES = ("sum", "mean", "max", "min")
BATCHED_POOL_MODES = ("sum", "mean")


def stratum_slots(hop_budget: int) -> list[tuple[int, int]]:
    """All (i, j) with i, j >= 1 and i + j <= hop_budget, lexicographic."""
    return [(i, j) for i in range(1, hop_budget)
            for j in range(1, hop_budget - i + 1)]


def adjacency(num_entities: int, heads: np.ndarray, tails: np.ndarray) -> sp.csr_matrix:
    """0/1 adjacency (parallel edges collapse; distance ignores multiplicity)."""
    data = np.ones(len(heads), dtype=np.float64)
    mat = sp.csr_matrix((data, (heads, tails)), shape=(num_entities, num_entities))
    return _binarize(mat)


def _binarize(mat: sp.spmatrix) -> sp.csr_matrix:
    out = sp.csr_matrix(mat)
    out.eliminate_zeros()
    out.data[:] = 1.0
    return out


def distances_from(adj: sp.csr_matrix, source: int, max_hops: int) -> np.ndarray:
    """Exact BFS distance from ``source`` along edge direction; -1 beyond
    ``max_hops`` or unreachable."""
    num = adj.shape[0]
    dist = np.full(num, -1, dtype=np.int64)
    dist[source] = 0
    frontier = np.array([source], dtype=np.int64)
    indptr, indices = adj.indptr, adj.indices
    for step in range(1, max_hops + 1):
        if len(frontier) == 0:
            break
        nbrs = np.concatenate([indices[indptr[f]:indptr[f + 1]] for f in frontier]) \
            if len(frontier) else np.empty(0, dtype=np.int64)
        nbrs = np.unique(nbrs)
        fresh = nbrs[dist[nbrs] < 0]
        dist[fresh] = step
        frontier = fresh
    return dist


def distances_to(adj: sp.csr_matrix, target: int, max_hops: int) -> np.ndarray:
    """Exact BFS distance from every node to ``target`` (reverse edges)."""
    return distances_from(sp.csr_matrix(adj.T), target, max_hops)


def exact_distance_matrices(adj: sp.csr_matrix, max_hops: int) -> list[sp.csr_matrix]:
    """[D_1, ..., D_max]: D_j[w, v] = 1 iff the directed distance w->v is
    exactly j. Built by peeling walk-reachability against everything nearer."""
    num = adj.shape[0]
    eye = sp.identity(num, dtype=np.float64, format="csr")
    seen = eye  # support = {d <= t-1}
    walk = _binarize(adj)  # support = {walk of length exactly t exists}
    out: list[sp.csr_matrix] = []
    for _t in range(1, max_hops + 1):
        exact = _binarize(walk - walk.multiply(seen))
        out.append(exact)
        seen = _binarize(seen + exact)
        walk = _binarize(walk @ adj)
    return out


def stratum_members(adj: sp.csr_matrix, u: int, v: int, i: int, j: int) -> np.ndarray:
    """Reference route: nodes w with d(u, w) == i and d(w, v) == j, ascending."""
    du = distances_from(adj, u, i)
    dv = distances_to(adj, v, j)
    return np.flatnonzero((du == i) & (dv == j)).astype(np.int64)


def pool_rows(h: Tensor, rows: np.ndarray, mode: str) -> tuple[Tensor, int]:
    """Reference pooling of the given rows of ``h``; an empty set pools to the
    zero vector. Max/min ties resolve to the lowest row index (rows are taken
    in ascending order)."""
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pool mode {mode!r}")
    rows = np.asarray(rows, dtype=np.int64)
    count = len(rows)
    if count == 0:
        return ad.constant(np.zeros(h.data.shape[1])), 0
    gathered = ad.gather_rows(h, np.sort(rows))
    if mode == "sum":
        return ad.tsum(gathered, axis=0), count
    if mode == "mean":
        return ad.tmean(gathered, axis=0), count
    if mode == "max":
        return ad.tmax(gathered, axis=0), count
    return -ad.tmax(-gathered, axis=0), count


@dataclass
class StrataTable:
    """Precomputed exact-distance matrices for batched all-target pooling.

    ``mats[j - 1]`` holds (D_j^T, D_j) as float 0/1 CSR; with a source-side
    mask m_i (1 on nodes at distance i from u) the slot (i, j) pooled sums for
    every candidate v come out of one sparse matmul:

        pooled[v] = sum_{w : D_j[w, v] = 1} m_i[w] * H[w]  =  (D_j^T @ (m_i * H))[v]
    """

    mats: list[tuple[sp.csr_matrix, sp.csr_matrix]]

    @classmethod
    def build(cls, adj: sp.csr_matrix, max_j: int) -> "StrataTable":
        exact = exact_distance_matrices(adj, max_j)
        return cls(mats=[(sp.csr_matrix(m.T), m) for m in exact])

    @property
    def max_j(self) -> int:
        return len(self.mats)

    def counts(self, j: int, source_mask: np.ndarray) -> np.ndarray:
        """Stratum sizes |{w : mask[w], d(w, v) = j}| for every v."""
        mat_t, _ = self.mats[j - 1]
        return np.asarray(mat_t @ source_mask.astype(np.float64))

    def pooled(self, j: int, source_mask: np.ndarray, h: Tensor,
               mode: str = "sum") -> Tensor:
        """Batched pooled stratum states, one row per candidate target."""
        if mode not in BATCHED_POOL_MODES:
            raise ValueError(
                f"batched pooling supports {BATCHED_POOL_MODES}, got {mode!r}")
        mat_t, mat = self.mats[j - 1]
        masked = ad.mul(h, ad.constant(source_mask[:, None]))
        total = ad.spmm(mat_t, mat, masked)
        if mode == "sum":
            return total
        cnt = self.counts(j, source_mask)
        return ad.mul(total, ad.constant(1.0 / np.maximum(cnt, 1.0)[:, None]))
