"""Small synthetic graph families for smoke runs and sanity checks."""

from __future__ import annotations

import numpy as np

from .graph import DEFAULT_MAX_DEGREE, Graph, GraphDataset, degree_features, symmetric_adjacency


def cycle(n: int, label=None) -> Graph:
    return Graph(symmetric_adjacency(n, [(i, (i + 1) % n) for i in range(n)]), label=label)


def path(n: int, label=None) -> Graph:
    return Graph(symmetric_adjacency(n, [(i, i + 1) for i in range(n - 1)]), label=label)


def star(leaves: int, label=None) -> Graph:
    """Star with ``leaves`` spokes; node 0 is the centre."""
    return Graph(symmetric_adjacency(leaves + 1, [(0, i) for i in range(1, leaves + 1)]), label=label)


def complete(n: int, label=None) -> Graph:
    return Graph(symmetric_adjacency(n, [(i, j) for i in range(n) for j in range(i + 1, n)]), label=label)


def erdos_renyi(n: int, p: float, rng: np.random.Generator, label=None) -> Graph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return Graph(symmetric_adjacency(n, np.stack([iu[keep], ju[keep]], axis=1)), label=label)


def toy_cycles_stars(max_degree: int = DEFAULT_MAX_DEGREE) -> GraphDataset:
    """Four 6-cycles (class 0) and four 5-leaf stars (class 1), degree features."""
    graphs = [cycle(6, 0) for _ in range(4)] + [star(5, 1) for _ in range(4)]
    return GraphDataset("toy-cycles-stars", [degree_features(g, max_degree) for g in graphs])


def cycles_vs_stars(per_class: int = 50, max_degree: int = DEFAULT_MAX_DEGREE) -> GraphDataset:
    """Cycles C_8..C_12 against stars S_7..S_11, sizes cycled evenly within each class."""
    graphs = [cycle(8 + i % 5, 0) for i in range(per_class)]
    graphs += [star(7 + i % 5, 1) for i in range(per_class)]
    return GraphDataset("cycles-vs-stars", [degree_features(g, max_degree) for g in graphs])
