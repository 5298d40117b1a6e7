"""Multilevel coarsening: cluster assignments, coarse adjacencies, pool/unpool.

A hierarchy for a graph is a chain of levels. Level ``l`` holds the adjacency
at that scale and (except at the top) the assignment of its nodes to the
super-nodes of level ``l + 1``. Coarse adjacencies are ``P^T A P`` with the
diagonal dropped, so their weights count the edges crossing each pair of
clusters.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError
from .graph import Graph


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of integers (global seed, graph index, ...)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def target_clusters(n: int, ratio: float) -> int:
    """``max(1, ceil(ratio * n))``, robust to float noise such as ``0.1 * 30``."""
    return max(1, math.ceil(round(ratio * n, 9)))


@dataclass(frozen=True)
class Assignment:
    """Hard node-to-cluster map; the row-one-hot matrix ``P`` of shape ``n x n'``."""

    cluster_of: np.ndarray
    n_prime: int

    def __post_init__(self):
        c = np.asarray(self.cluster_of, dtype=np.int64)
        object.__setattr__(self, "cluster_of", c)
        if c.ndim != 1:
            raise DimensionError("cluster_of must be 1-D")
        if len(c) and (c.min() < 0 or c.max() >= self.n_prime):
            raise ValueError(f"cluster ids must lie in [0, {self.n_prime})")
        if np.bincount(c, minlength=self.n_prime).min(initial=1) == 0:
            raise ValueError("assignment has an empty cluster")

    @property
    def n(self) -> int:
        return len(self.cluster_of)

    @classmethod
    def identity(cls, n: int) -> "Assignment":
        return cls(np.arange(n), n)

    def matrix(self) -> np.ndarray:
        p = np.zeros((self.n, self.n_prime))
        p[np.arange(self.n), self.cluster_of] = 1.0
        return p

    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.n_prime)

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.cluster_of, kind="stable")
        return np.split(order, np.cumsum(self.sizes())[:-1])


def cut_size(adjacency: sp.spmatrix, cluster_of) -> float:
    """Total weight of undirected edges whose endpoints lie in different clusters."""
    coo = sp.triu(adjacency, k=1).tocoo()
    c = np.asarray(cluster_of)
    return float(coo.data[c[coo.row] != c[coo.col]].sum())


def coarsen_adjacency(adjacency: sp.spmatrix, assignment: Assignment, binarize: bool = False) -> sp.csr_matrix:
    """Cross-cluster edge weights ``P^T A P`` with a zero diagonal."""
    if adjacency.shape[0] != assignment.n:
        raise DimensionError(f"assignment covers {assignment.n} nodes, adjacency has {adjacency.shape[0]}")
    coo = sp.coo_matrix(adjacency)
    c = assignment.cluster_of
    r, k = c[coo.row], c[coo.col]
    off = r != k
    m = assignment.n_prime
    out = sp.coo_matrix((coo.data[off], (r[off], k[off])), shape=(m, m)).tocsr()
    out.sum_duplicates()
    out.eliminate_zeros()
    if binarize:
        out.data[:] = 1.0
    out.sort_indices()
    return out


def pool(assignment: Assignment, h: np.ndarray) -> np.ndarray:
    """``P^T H``: sum member rows into their cluster row."""
    h = np.asarray(h)
    if h.shape[0] != assignment.n:
        raise DimensionError(f"pool: {h.shape[0]} rows for an assignment over {assignment.n} nodes")
    out = np.zeros((assignment.n_prime,) + h.shape[1:], dtype=h.dtype)
    np.add.at(out, assignment.cluster_of, h)
    return out


def unpool(assignment: Assignment, h: np.ndarray) -> np.ndarray:
    """``P H'``: copy each cluster row to all of its members."""
    h = np.asarray(h)
    if h.shape[0] != assignment.n_prime:
        raise DimensionError(f"unpool: {h.shape[0]} rows for {assignment.n_prime} clusters")
    return h[assignment.cluster_of]


class Partitioner(Protocol):
    def __call__(self, adjacency: sp.spmatrix, ratio: float, seed: int = 0) -> Assignment: ...


def _canonical(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel clusters in order of their smallest member."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inverse], len(first)


def _contract(adjacency: sp.csr_matrix, labels: np.ndarray, k: int) -> sp.csr_matrix:
    return coarsen_adjacency(adjacency, Assignment(labels, k))


class HeavyEdgePartitioner:
    """Deterministic multilevel partitioner.

    Heavy-edge matching passes contract the graph until the target cluster
    count is reached. Merges are capped at the balanced cluster size and the
    cap is relaxed only when a pass stalls. Leftover clusters are merged
    (adjacent pairs first, then across components), and a greedy boundary
    refinement moves single nodes when that lowers the cut without breaking
    cluster connectivity or balance. The best of ``trials`` seeded runs is kept.
    """

    def __init__(self, trials: int = 4, refine_passes: int = 4):
        self.trials = trials
        self.refine_passes = refine_passes

    def __call__(self, adjacency, ratio: float, seed: int = 0) -> Assignment:
        adj = sp.csr_matrix(adjacency, dtype=float)
        adj.setdiag(0)
        adj.eliminate_zeros()
        n = adj.shape[0]
        target = target_clusters(n, ratio)
        if target >= n:
            return Assignment.identity(n)
        best = None
        for trial in range(self.trials):
            rng = np.random.default_rng(derive_seed(seed, trial))
            labels = self._run(adj, target, rng)
            sizes = np.bincount(labels)
            key = (cut_size(adj, labels), int(sizes.max()))
            if best is None or key < best[0]:
                best = (key, labels)
        labels, k = _canonical(best[1])
        return Assignment(labels, k)

    def _run(self, adj, target, rng) -> np.ndarray:
        n = adj.shape[0]
        labels = np.arange(n)
        count = n
        balanced = math.ceil(n / target)
        cap = balanced
        while count > target:
            w = _contract(adj, labels, count)
            sizes = np.bincount(labels, minlength=count)
            merged = _match_pass(w, sizes, count - target, cap, rng)
            if merged is None:
                if cap >= n:
                    break
                cap = min(n, cap + balanced)
                continue
            labels = merged[labels]
            labels, count = _canonical(labels)
        labels = _merge_leftovers(adj, labels, target)
        for _ in range(self.refine_passes):
            if not _refine_pass(adj, labels, balanced, rng):
                break
        return labels


def _match_pass(w: sp.csr_matrix, sizes, max_merges: int, cap: int, rng):
    """One heavy-edge matching pass over super-nodes; ``None`` if nothing matched.

    Visits lighter-degree super-nodes first (seeded shuffle among equals) and
    pairs each with the unmatched neighbour of heaviest connecting weight,
    breaking ties by lower id.
    """
    k = w.shape[0]
    deg = np.diff(w.indptr)
    perm = rng.permutation(k)
    order = perm[np.argsort(deg[perm], kind="stable")]
    mate = np.full(k, -1)
    merges = 0
    for u in order:
        if merges >= max_merges:
            break
        if mate[u] >= 0:
            continue
        best, best_w = -1, 0.0
        lo, hi = w.indptr[u], w.indptr[u + 1]
        for v, wt in zip(w.indices[lo:hi], w.data[lo:hi]):
            if v == u or mate[v] >= 0 or sizes[u] + sizes[v] > cap:
                continue
            if wt > best_w or (wt == best_w and v < best):
                best, best_w = v, wt
        if best >= 0:
            mate[u], mate[best] = best, u
            merges += 1
    if merges == 0:
        return None
    rep = np.arange(k)
    paired = mate >= 0
    rep[paired] = np.minimum(np.arange(k)[paired], mate[paired])
    return rep


def _merge_leftovers(adj, labels, target) -> np.ndarray:
    labels, count = _canonical(labels)
    while count > target:
        w = _contract(adj, labels, count).tocoo()
        sizes = np.bincount(labels, minlength=count)
        upper = w.row < w.col
        if upper.any():
            r, c, wt = w.row[upper], w.col[upper], w.data[upper]
            # smallest combined size, then heaviest link, then lowest ids
            pick = np.lexsort((c, r, -wt, sizes[r] + sizes[c]))[0]
            a, b = r[pick], c[pick]
        else:
            # no adjacent clusters left: join the smallest cluster to the
            # nearest-id cluster among the smallest remaining ones
            a = int(np.lexsort((np.arange(count), sizes))[0])
            others = np.array([j for j in range(count) if j != a])
            b = int(others[np.lexsort((np.abs(others - a), sizes[others]))[0]])
        labels = np.where(labels == max(a, b), min(a, b), labels)
        labels, count = _canonical(labels)
    return labels


def _connected_without(adj, members: np.ndarray, drop: int) -> bool:
    rest = set(int(m) for m in members if m != drop)
    if not rest:
        return False
    start = next(iter(rest))
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj.indices[adj.indptr[u]:adj.indptr[u + 1]]:
            v = int(v)
            if v in rest and v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(rest)


def _refine_pass(adj, labels, balanced: int, rng) -> bool:
    """Greedy single-node moves that strictly reduce the cut. Mutates ``labels``."""
    sizes = np.bincount(labels)
    moved = False
    for i in rng.permutation(adj.shape[0]):
        a = labels[i]
        if sizes[a] == 1:
            continue
        lo, hi = adj.indptr[i], adj.indptr[i + 1]
        conn: dict[int, float] = {}
        for v, wt in zip(adj.indices[lo:hi], adj.data[lo:hi]):
            conn[labels[v]] = conn.get(labels[v], 0.0) + wt
        own = conn.get(a, 0.0)
        best, best_gain = -1, 0.0
        for b, wb in sorted(conn.items()):
            if b == a or sizes[b] + 1 > max(balanced, sizes[a]):
                continue
            if wb - own > best_gain:
                best, best_gain = b, wb - own
        if best < 0 or not _connected_without(adj, np.flatnonzero(labels == a), i):
            continue
        labels[i] = best
        sizes[a] -= 1
        sizes[best] += 1
        moved = True
    return moved


@dataclass
class CoarseLevel:
    scale: int
    adjacency: sp.csr_matrix
    assignment: Assignment | None = None
    # derived per-level constants (dense adjacency, positional encodings)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class Hierarchy:
    """Levels ordered fine to coarse; ``levels[0]`` is the input graph (scale 1)."""

    levels: list[CoarseLevel]

    @property
    def depth(self) -> int:
        return len(self.levels)

    def sizes(self) -> list[int]:
        return [lv.n for lv in self.levels]

    def assignments(self) -> list[Assignment]:
        return [lv.assignment for lv in self.levels[:-1]]

    def descendants(self, top_node: int) -> np.ndarray:
        """Scale-1 nodes that collapse into ``top_node`` at the coarsest scale."""
        cluster = np.arange(self.levels[0].n)
        for a in self.assignments():
            cluster = a.cluster_of[cluster]
        return np.flatnonzero(cluster == top_node)

    def to_json(self) -> dict:
        out = []
        for lv in self.levels:
            coo = sp.triu(lv.adjacency, k=1).tocoo()
            order = np.lexsort((coo.col, coo.row))
            edges = [[int(coo.row[k]), int(coo.col[k]), _num(coo.data[k])] for k in order]
            out.append({
                "scale": lv.scale,
                "n": lv.n,
                "edges": edges,
                "cluster_of": None if lv.assignment is None else lv.assignment.cluster_of.tolist(),
            })
        return {"depth": self.depth, "levels": out}


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


def build_hierarchy(
    graph: Graph | sp.spmatrix,
    depth: int,
    ratio: float,
    seed: int = 0,
    partitioner: Partitioner | None = None,
    binarize: bool = False,
) -> Hierarchy:
    """Coarsen ``graph`` into at most ``depth`` scales.

    The chain stops early once a level has a single node.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    partitioner = partitioner or HeavyEdgePartitioner()
    adj = graph.adjacency if isinstance(graph, Graph) else sp.csr_matrix(graph, dtype=float)
    levels = [CoarseLevel(1, adj)]
    while len(levels) < depth and levels[-1].n > 1:
        cur = levels[-1]
        assignment = partitioner(cur.adjacency, ratio, derive_seed(seed, cur.scale))
        cur.assignment = assignment
        levels.append(CoarseLevel(cur.scale + 1, coarsen_adjacency(cur.adjacency, assignment, binarize)))
    return Hierarchy(levels)
