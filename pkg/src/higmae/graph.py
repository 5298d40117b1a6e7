"""Graph containers and dataset ingestion (TU text format, JSON lines)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import IngestError

log = logging.getLogger(__name__)

DEFAULT_MAX_DEGREE = 400


def symmetric_adjacency(n: int, edges, weights=None) -> sp.csr_matrix:
    """Build a symmetric CSR adjacency from an undirected edge list.

    Self-loops are dropped. Repeated edges collapse: with ``weights=None``
    every present pair gets weight 1, otherwise the largest given weight wins.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=float)
    keep = edges[:, 0] != edges[:, 1]
    edges, w = edges[keep], w[keep]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    vals = np.concatenate([w, w])
    # max-reduce duplicates instead of summing them
    keys = rows * max(n, 1) + cols
    order = np.lexsort((-vals, keys))
    first = np.ones(len(order), dtype=bool)
    first[1:] = keys[order][1:] != keys[order][:-1]
    sel = order[first]
    coo = sp.coo_matrix((vals[sel], (rows[sel], cols[sel])), shape=(n, n))
    adj = coo.tocsr()
    adj.sort_indices()
    return adj


@dataclass
class Graph:
    """Undirected graph with a symmetric CSR adjacency and dense node features."""

    adjacency: sp.csr_matrix
    x: np.ndarray | None = None
    label: int | None = None
    node_labels: np.ndarray | None = None

    def __post_init__(self):
        a = sp.csr_matrix(self.adjacency, dtype=float)
        a.sort_indices()
        self.adjacency = a
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=float).reshape(self.n, -1)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_features(self) -> int:
        return 0 if self.x is None else self.x.shape[1]

    def degrees(self) -> np.ndarray:
        """Unweighted degree (number of neighbours) of each node."""
        return np.diff(self.adjacency.indptr)

    def edges(self) -> np.ndarray:
        """Undirected edges ``(i, j)`` with ``i < j``, shape ``(m, 2)``."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    def edge_weights(self) -> np.ndarray:
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.data[order]

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency.toarray()


@dataclass
class GraphDataset:
    name: str
    graphs: list[Graph]
    num_classes: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.graphs:
            raise IngestError(f"dataset {self.name!r} has no graphs")
        widths = {g.num_features for g in self.graphs}
        if len(widths) != 1:
            raise IngestError(f"dataset {self.name!r} mixes feature widths {sorted(widths)}")
        labels = self.labels()
        if labels is not None:
            if self.num_classes is None:
                self.num_classes = int(labels.max()) + 1
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise IngestError(f"labels outside [0, {self.num_classes})")

    @property
    def d0(self) -> int:
        return self.graphs[0].num_features

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def labels(self) -> np.ndarray | None:
        if any(g.label is None for g in self.graphs):
            return None
        return np.array([g.label for g in self.graphs], dtype=np.int64)


def degree_features(g: Graph, max_degree: int = DEFAULT_MAX_DEGREE) -> Graph:
    """Return a copy of ``g`` whose features are one-hot clamped degrees."""
    deg = np.minimum(g.degrees(), max_degree)
    x = np.zeros((g.n, max_degree + 1))
    x[np.arange(g.n), deg] = 1.0
    return Graph(g.adjacency.copy(), x, g.label, g.node_labels)


def _one_hot(values: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(values), width))
    out[np.arange(len(values)), values] = 1.0
    return out


def _read_lines(path: Path) -> list[str]:
    # splitlines() covers LF and CRLF
    return [ln.strip() for ln in path.read_text().splitlines()]


def _parse_ints(path: Path, width: int | None = None) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line:
            continue
        try:
            vals = [int(float(tok)) for tok in line.replace(",", " ").split()]
        except ValueError:
            raise IngestError(f"{path.name}:{lineno}: cannot parse {line!r}") from None
        if width is not None and len(vals) != width:
            raise IngestError(f"{path.name}:{lineno}: expected {width} values, got {len(vals)}")
        rows.append(vals)
    return np.array(rows, dtype=np.int64).reshape(len(rows), -1)


def load_tu_dataset(directory, name: str, max_degree: int = DEFAULT_MAX_DEGREE) -> GraphDataset:
    """Load a TU graph-classification dataset from ``directory``.

    Mandatory files are ``<name>_A.txt`` and ``<name>_graph_indicator.txt``;
    graph labels, node labels and node attributes are picked up when present.
    Without node labels or attributes, node features fall back to
    :func:`degree_features`.
    """
    directory = Path(directory)

    def path(suffix):
        return directory / f"{name}_{suffix}.txt"

    for suffix in ("A", "graph_indicator"):
        if not path(suffix).is_file():
            raise IngestError(f"missing mandatory file {path(suffix).name} in {directory}")

    indicator = _parse_ints(path("graph_indicator"), width=1)[:, 0]
    num_nodes = len(indicator)
    graph_ids = np.unique(indicator)
    if len(graph_ids) == 0:
        raise IngestError(f"{path('graph_indicator').name} is empty")

    labels = None
    if path("graph_labels").is_file():
        raw = _parse_ints(path("graph_labels"), width=1)[:, 0]
        _, labels = np.unique(raw, return_inverse=True)
    num_graphs = len(labels) if labels is not None else int(graph_ids.max())
    for lineno, gid in enumerate(indicator, start=1):
        if gid < 1 or gid > num_graphs:
            raise IngestError(f"{path('graph_indicator').name}:{lineno}: node references unknown graph id {gid}")
    expected = np.arange(1, num_graphs + 1)
    missing = np.setdiff1d(expected, graph_ids)
    if len(missing):
        raise IngestError(f"{path('graph_indicator').name}: graph id {missing[0]} has no nodes")

    blocks = []
    node_labels = None
    if path("node_labels").is_file():
        raw = _parse_ints(path("node_labels"))[:, 0]
        if len(raw) != num_nodes:
            raise IngestError(f"{path('node_labels').name}: {len(raw)} rows for {num_nodes} nodes")
        classes, node_labels = np.unique(raw, return_inverse=True)
        blocks.append(_one_hot(node_labels, len(classes)))
    if path("node_attributes").is_file():
        attrs = np.loadtxt(path("node_attributes"), delimiter=",", ndmin=2)
        if len(attrs) != num_nodes:
            raise IngestError(f"{path('node_attributes').name}: {len(attrs)} rows for {num_nodes} nodes")
        blocks.append(attrs)
    features = np.concatenate(blocks, axis=1) if blocks else None

    edges = _parse_ints(path("A"), width=2) - 1
    if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
        raise IngestError(f"{path('A').name}: edge references a node outside 1..{num_nodes}")

    order = np.argsort(indicator, kind="stable")
    starts = np.searchsorted(indicator[order], expected)
    ends = np.searchsorted(indicator[order], expected, side="right")
    local = np.empty(num_nodes, dtype=np.int64)
    for s, e in zip(starts, ends):
        local[order[s:e]] = np.arange(e - s)
    if len(edges):
        same = indicator[edges[:, 0]] == indicator[edges[:, 1]]
        if not same.all():
            bad = int(np.flatnonzero(~same)[0]) + 1
            raise IngestError(f"{path('A').name}:{bad}: edge joins nodes of different graphs")
    edge_graph = indicator[edges[:, 0]] if len(edges) else np.empty(0, dtype=np.int64)

    graphs = []
    for k, gid in enumerate(expected):
        nodes = order[starts[k]:ends[k]]
        ge = edges[edge_graph == gid]
        adj = symmetric_adjacency(len(nodes), local[ge])
        g = Graph(
            adj,
            None if features is None else features[nodes],
            None if labels is None else int(labels[k]),
            None if node_labels is None else node_labels[nodes],
        )
        graphs.append(g if features is not None else degree_features(g, max_degree))
    log.info("loaded %s: %d graphs, %d nodes", name, len(graphs), num_nodes)
    return GraphDataset(
        name,
        graphs,
        num_classes=None if labels is None else int(labels.max()) + 1,
        provenance={"path": str(directory), "format": "tu"},
    )


def load_jsonl(path, max_degree: int = DEFAULT_MAX_DEGREE, name: str | None = None) -> GraphDataset:
    """Load one graph per line: ``{"edges": [[u, v], ...], "features": [...], "label": k}``.

    ``n`` is taken from the feature rows when present, otherwise from an
    optional ``"n"`` field or the largest node id in ``edges``. Graphs without
    features get degree one-hot features.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"missing file {path}")
    graphs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("line is not a JSON object")
            edges = np.asarray(obj.get("edges", []), dtype=np.int64).reshape(-1, 2)
            feats = obj.get("features")
            if feats is not None:
                feats = np.asarray(feats, dtype=float)
                if feats.ndim == 1:
                    feats = feats[:, None]
                n = len(feats)
            else:
                n = int(obj.get("n", edges.max() + 1 if len(edges) else 1))
            if len(edges) and (edges.min() < 0 or edges.max() >= n):
                raise ValueError(f"edge endpoint outside 0..{n - 1}")
            label = obj.get("label")
            g = Graph(symmetric_adjacency(n, edges), feats, None if label is None else int(label))
        except (ValueError, TypeError) as exc:
            raise IngestError(f"{path.name}:{lineno}: {exc}") from None
        graphs.append(g if feats is not None else degree_features(g, max_degree))
    return GraphDataset(name or path.stem, graphs, provenance={"path": str(path), "format": "jsonl"})


def graph_to_json(g: Graph) -> dict:
    obj = {"edges": g.edges().tolist()}
    if g.x is not None:
        obj["features"] = g.x.tolist()
    else:
        obj["n"] = g.n
    if g.label is not None:
        obj["label"] = int(g.label)
    return obj


def write_jsonl(dataset: GraphDataset, path) -> None:
    with open(path, "w") as fh:
        for g in dataset:
            fh.write(json.dumps(graph_to_json(g)) + "\n")


def load_dataset(fmt: str, path, name: str | None = None, max_degree: int = DEFAULT_MAX_DEGREE) -> GraphDataset:
    if fmt == "tu":
        if not name:
            raise IngestError("TU format needs a dataset name")
        return load_tu_dataset(path, name, max_degree)
    if fmt == "jsonl":
        return load_jsonl(path, max_degree, name)
    raise IngestError(f"unknown dataset format {fmt!r}")
