"""Graph collections: loading, validation, propagation operators, splits and episodes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, EpisodeError, LoadError, ParseError, PartitionError, ValidationError
from .gradcore import SparseMatrix


@dataclass(eq=False)
class Graph:
    """One attributed graph.

    ``labels`` is an int vector (-1 where unlabeled) for single-label
    collections, or an ``n x |C|`` 0/1 matrix for multi-label ones.
    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.edges = _canonical_edges(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2), self.node_count)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        self.labels = np.asarray(self.labels)
        n = self.node_count
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError(f"features must be {n} x d, got {self.features.shape}")
        if self.labeled_mask.shape != (n,):
            raise ValidationError("labeled_mask length differs from node_count")
        if self.labels.shape[0] != n:
            raise ValidationError("labels length differs from node_count")
        if self.labels.ndim == 1:
            self.labels = self.labels.astype(np.int64)
            if np.any(self.labels[self.labeled_mask] < 0):
                raise ValidationError("labeled node without a category")
        else:
            self.labels = self.labels.astype(np.float64)
            lab = self.labels[self.labeled_mask]
            if not np.all((lab == 0) | (lab == 1)):
                raise ValidationError("multi-label targets must be 0/1")

    @property
    def multi_label(self) -> bool:
        return self.labels.ndim == 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labeled_mask)

    def target_matrix(self, nodes: np.ndarray, num_categories: int) -> np.ndarray:
        return label_targets(self.labels[np.asarray(nodes, dtype=np.int64)], num_categories)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        return deg


def label_targets(labels: np.ndarray, num_categories: int) -> np.ndarray:
    """One-hot rows for category indices; 0/1 label matrices pass through."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    out = np.zeros((len(labels), num_categories))
    out[np.arange(len(labels)), labels.astype(np.int64)] = 1.0
    return out


def _canonical_edges(edges: np.ndarray, n: int) -> np.ndarray:
    if len(edges) and (edges.min() < 0 or edges.max() >= n):
        raise ValidationError(f"edge endpoint outside [0, {n})")
    edges = edges[edges[:, 0] != edges[:, 1]]
    edges = np.sort(edges, axis=1)
    if len(edges):
        edges = np.unique(edges, axis=0)
    return edges.reshape(-1, 2)


@dataclass(eq=False)
class GraphCollection:
    graphs: list[Graph]
    feature_dim: int
    num_categories: int
    multi_label: bool = False
    name: str = ""

    def __post_init__(self) -> None:
        for i, g in enumerate(self.graphs):
            if g.feature_dim != self.feature_dim:
                raise ValidationError(f"graph {i}: feature dim {g.feature_dim} != {self.feature_dim}")
            if g.multi_label != self.multi_label:
                raise ValidationError(f"graph {i}: label kind disagrees with collection")
            if self.multi_label:
                if g.labels.shape[1] != self.num_categories:
                    raise ValidationError(f"graph {i}: label width != {self.num_categories}")
            elif np.any(g.labels[g.labeled_mask] >= self.num_categories):
                raise ValidationError(f"graph {i}: category index >= {self.num_categories}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __getitem__(self, i) -> Graph:
        return self.graphs[i]

    def subset(self, indices: Sequence[int], name: str | None = None) -> "GraphCollection":
        return GraphCollection([self.graphs[i] for i in indices], self.feature_dim, self.num_categories,
                               self.multi_label, self.name if name is None else name)


@dataclass
class EpisodeSplit:
    """Support nodes with their targets, and query nodes (targets optional)."""

    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.support = np.asarray(self.support, dtype=np.int64)
        self.query = np.asarray(self.query, dtype=np.int64)
        if len(self.support) == 0:
            raise EpisodeError("support set is empty")
        if np.intersect1d(self.support, self.query).size:
            raise EpisodeError("support and query overlap")


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

TU_PRESETS = {
    # graphs, feature dim, categories, multi-label
    "COX2": dict(graphs=467, feature_dim=3, num_categories=8, multi_label=False),
    "DHFR": dict(graphs=756, feature_dim=3, num_categories=9, multi_label=False),
    "Cuneiform": dict(graphs=267, feature_dim=3, num_categories=7, multi_label=True),
}


def _read_table(path: Path, dtype=np.float64) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"missing file {path.name}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.replace(",", " ").split()])
            except ValueError:
                raise ParseError(f"non-numeric entry in {path.name}", lineno) from None
    if not rows:
        return np.zeros((0, 0), dtype=dtype)
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ParseError(f"ragged rows in {path.name}")
    return np.array(rows, dtype=dtype)


def _one_hot_columns(values: np.ndarray) -> tuple[np.ndarray, int]:
    cats = np.unique(values)
    idx = np.searchsorted(cats, values)
    out = np.zeros((len(values), len(cats)))
    out[np.arange(len(values)), idx] = 1.0
    return out, len(cats)


def load_tudataset(directory, name: str, target_channel: "int | str" = 0, multi_label: bool | None = None,
                   feature_channel: int | None = None, check_preset: bool = True) -> GraphCollection:
    """Read a collection in the multi-file ``<name>_A.txt`` format.

    Node labels become targets.  ``target_channel`` picks a column of the node
    label file; ``"all"`` concatenates the one-hot encodings of every column
    into a multi-label target.  Features come from ``<name>_node_attributes.txt``
    when it exists, otherwise from the one-hot encoding of label column
    ``feature_channel`` (which must differ from the target column).
    """
    d = Path(directory)
    if (d / name).is_dir() and not (d / f"{name}_A.txt").exists():
        d = d / name
    preset = TU_PRESETS.get(name) if check_preset else None
    if multi_label is None:
        multi_label = preset["multi_label"] if preset else target_channel == "all"
    if multi_label and target_channel != "all":
        target_channel = "all"

    adj = _read_table(d / f"{name}_A.txt").astype(np.int64)
    indicator = _read_table(d / f"{name}_graph_indicator.txt").astype(np.int64).reshape(-1)
    node_labels = _read_table(d / f"{name}_node_labels.txt")
    attr_path = d / f"{name}_node_attributes.txt"
    attributes = _read_table(attr_path) if attr_path.exists() else None

    n_total = len(indicator)
    if n_total == 0:
        raise EmptyInputError(f"{name}: no nodes")
    if np.any(np.diff(indicator) < 0) or indicator[0] != 1 or np.any(np.diff(indicator) > 1):
        raise ValidationError(f"{name}: graph indicator must be sorted and contiguous from 1")
    if node_labels.shape[0] != n_total:
        raise ValidationError(f"{name}: node label count {node_labels.shape[0]} != {n_total} nodes")
    if attributes is not None and attributes.shape[0] != n_total:
        raise ValidationError(f"{name}: attribute count {attributes.shape[0]} != {n_total} nodes")

    if target_channel == "all":
        parts = [_one_hot_columns(node_labels[:, j])[0] for j in range(node_labels.shape[1])]
        targets = np.concatenate(parts, axis=1)
        num_categories = targets.shape[1]
    else:
        t = int(target_channel)
        if t >= node_labels.shape[1]:
            raise ValidationError(f"{name}: no label column {t}")
        cats = np.unique(node_labels[:, t])
        targets = np.searchsorted(cats, node_labels[:, t]).astype(np.int64)
        num_categories = len(cats)

    if attributes is not None:
        features = attributes
    else:
        if feature_channel is None:
            raise ValidationError(f"{name}: no node attributes and no feature_channel given")
        if target_channel != "all" and feature_channel == int(target_channel):
            raise ValidationError(f"{name}: feature channel equals the target channel (label leakage)")
        if target_channel == "all":
            raise ValidationError(f"{name}: every label column is a target; cannot derive features from labels")
        features, _ = _one_hot_columns(node_labels[:, feature_channel])

    if preset:
        for key, got in (("feature_dim", features.shape[1]), ("num_categories", num_categories),
                         ("graphs", int(indicator[-1]))):
            if got != preset[key]:
                raise ValidationError(f"{name}: {key} is {got}, expected {preset[key]}")

    if len(adj) and (adj.min() < 1 or adj.max() > n_total):
        raise ValidationError(f"{name}: edge endpoint outside 1..{n_total}")
    if len(adj) and np.any(indicator[adj[:, 0] - 1] != indicator[adj[:, 1] - 1]):
        raise ValidationError(f"{name}: edge joins nodes of different graphs")

    starts = np.searchsorted(indicator, np.arange(1, indicator[-1] + 2))
    edge_graph = indicator[adj[:, 0] - 1] if len(adj) else np.zeros(0, np.int64)
    order = np.argsort(edge_graph, kind="stable")
    adj, edge_graph = adj[order], edge_graph[order]
    edge_starts = np.searchsorted(edge_graph, np.arange(1, indicator[-1] + 2))
    graphs = []
    for gid in range(indicator[-1]):
        lo, hi = starts[gid], starts[gid + 1]
        e = adj[edge_starts[gid]:edge_starts[gid + 1]] - 1 - lo
        n = hi - lo
        graphs.append(Graph(n, e, features[lo:hi], targets[lo:hi], np.ones(n, dtype=bool), name=f"{name}/{gid}"))
    return GraphCollection(graphs, features.shape[1], num_categories, multi_label, name)


def load_jsonl(path, num_categories: int | None = None, name: str | None = None) -> GraphCollection:
    """One graph per line: ``{"n", "edges", "x", "y", "labeled"}``."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing file {path.name}")
    graphs: list[Graph] = []
    multi = None
    width = None
    max_label = -1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            try:
                g = _graph_from_record(rec, f"{path.stem}/{len(graphs)}")
            except (ValidationError, KeyError, TypeError, ValueError) as exc:
                msg = f"missing key {exc}" if isinstance(exc, KeyError) else str(exc)
                raise ParseError(msg, lineno) from None
            if multi is None:
                multi, width = g.multi_label, g.feature_dim
            elif g.multi_label != multi or g.feature_dim != width:
                raise ParseError("feature width or label kind differs from earlier records", lineno)
            if not multi and g.labeled_mask.any():
                max_label = max(max_label, int(g.labels[g.labeled_mask].max()))
            graphs.append(g)
    if not graphs:
        raise EmptyInputError(f"{path.name}: empty collection")
    if multi:
        c = graphs[0].labels.shape[1]
    else:
        c = num_categories if num_categories is not None else max_label + 1
    return GraphCollection(graphs, width, c, bool(multi), name or path.stem)


def _graph_from_record(rec: dict, name: str) -> Graph:
    if not isinstance(rec, dict):
        raise ValidationError("record is not an object")
    n = rec["n"]
    if not isinstance(n, int) or n <= 0:
        raise ValidationError("n must be a positive integer")
    edges = np.array(rec.get("edges", []), dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= n):
        raise ValidationError(f"edge endpoint outside [0, {n})")
    x = np.array(rec["x"], dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != n:
        raise ValidationError(f"x must have {n} rows")
    labeled = np.array(rec.get("labeled", [True] * n), dtype=bool)
    y_raw = rec["y"]
    if len(y_raw) != n:
        raise ValidationError(f"y must have {n} entries")
    if any(isinstance(v, list) for v in y_raw):
        width = max(len(v) for v in y_raw if isinstance(v, list))
        y = np.array([v if isinstance(v, list) else [0] * width for v in y_raw], dtype=np.float64)
    else:
        y = np.array([-1 if v is None else v for v in y_raw], dtype=np.int64)
    return Graph(n, edges, x, y, labeled, name=name)


# ---------------------------------------------------------------------------
# operators and preprocessing
# ---------------------------------------------------------------------------

def normalized_adjacency(g: Graph) -> SparseMatrix:
    """D^-1/2 (A + I) D^-1/2 with self-loops; cached on the graph."""
    s = g._cache.get("adj")
    if s is None:
        n = g.node_count
        u, v = g.edges[:, 0], g.edges[:, 1]
        rows = np.concatenate([u, v, np.arange(n)])
        cols = np.concatenate([v, u, np.arange(n)])
        deg = (g.degrees() + 1).astype(np.float64)
        inv = 1.0 / np.sqrt(deg)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        s = SparseMatrix(n, n, rows, cols, inv[rows] * inv[cols])
        g._cache["adj"] = s
    return s


def neighbor_mean_operator(g: Graph) -> SparseMatrix:
    """Row-stochastic neighbour averaging without self-loops; isolated rows are zero."""
    s = g._cache.get("mean")
    if s is None:
        n = g.node_count
        u, v = g.edges[:, 0], g.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        deg = g.degrees().astype(np.float64)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        s = SparseMatrix(n, n, rows, cols, 1.0 / deg[rows])
        g._cache["mean"] = s
    return s


def propagated_features(g: Graph, k: int) -> np.ndarray:
    """S^k X, computed once per (graph, k)."""
    key = ("prop", k)
    out = g._cache.get(key)
    if out is None:
        s = normalized_adjacency(g)
        out = g.features
        for _ in range(k):
            out = s.apply(out)
        g._cache[key] = out
    return out


def row_normalize_features(x: np.ndarray) -> np.ndarray:
    """Divide each nonzero row by its L1 norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.abs(x).sum(axis=1, keepdims=True)
    return np.divide(x, norms, out=x.copy(), where=norms > 0)


def row_normalize_collection(c: GraphCollection) -> GraphCollection:
    graphs = [Graph(g.node_count, g.edges, row_normalize_features(g.features), g.labels, g.labeled_mask, g.name)
              for g in c.graphs]
    return GraphCollection(graphs, c.feature_dim, c.num_categories, c.multi_label, c.name)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def partition_graphs(c: GraphCollection, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0):
    """Seeded train/val/test split; floor sizes for val and test, the rest to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise PartitionError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(c.graphs)
    if n < 3:
        raise PartitionError(f"need at least 3 graphs to partition, got {n}")
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    return (c.subset(perm[:n_train], f"{c.name}/train"),
            c.subset(perm[n_train:n_train + n_val], f"{c.name}/val"),
            c.subset(perm[n_train + n_val:], f"{c.name}/test"))


def sample_episode(g: Graph, support_fraction: float = 0.5, rng: np.random.Generator | None = None,
                   num_categories: int | None = None) -> EpisodeSplit:
    """Shuffle the labeled nodes; the first ceil(fraction * L) form the support."""
    if rng is None:
        rng = np.random.default_rng(0)
    labeled = g.labeled_nodes
    L = len(labeled)
    if L < 2:
        raise EpisodeError(f"graph {g.name!r} has {L} labeled nodes; need at least 2")
    k = max(1, math.ceil(support_fraction * L - 1e-9))
    if k >= L:
        raise EpisodeError(f"support fraction {support_fraction} leaves the query set empty")
    perm = labeled[rng.permutation(L)]
    support, query = perm[:k], perm[k:]
    return EpisodeSplit(support, g.labels[support], query, g.labels[query])


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------

def synth_collection(n_graphs: int, nodes_range: tuple[int, int], d: int, num_classes: int, homophily: float,
                     seed: int, avg_degree: float = 4.0, noise: float = 0.15, separation: float = 0.5,
                     graph_scale: float = 0.0, shift: float = 0.0, shift_fraction: float = 0.0,
                     name: str = "synth") -> GraphCollection:
    """Seeded, fully labeled collection with class-dependent Gaussian features.

    Class means are drawn once per collection.  ``graph_scale`` multiplies
    each graph's features by a per-graph factor ``exp(N(0, graph_scale))``
    (an inter-graph difference a single global model cannot absorb), and the
    last ``round(shift_fraction * n_graphs)`` graphs have every class mean
    displaced by ``shift`` along a fixed random direction.
    """
    if n_graphs <= 0 or d <= 0 or num_classes <= 0 or nodes_range[0] <= 0:
        raise ValidationError("synth_collection parameters must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, d)) * separation
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    n_shift = int(round(shift_fraction * n_graphs))
    graphs = []
    for gi in range(n_graphs):
        n = int(rng.integers(nodes_range[0], nodes_range[1] + 1))
        y = rng.integers(0, num_classes, size=n)
        mu = means + (shift * direction if gi >= n_graphs - n_shift else 0.0)
        x = mu[y] + noise * rng.normal(size=(n, d))
        if graph_scale > 0:
            x = x * float(np.exp(graph_scale * rng.normal()))
        edges = []
        per_node = max(1, int(round(avg_degree / 2)))
        for v in range(n):
            for _ in range(per_node):
                same = rng.random() < homophily
                pool = np.flatnonzero((y == y[v]) if same else (y != y[v]))
                pool = pool[pool != v]
                if len(pool) == 0:
                    continue
                edges.append((v, int(pool[rng.integers(len(pool))])))
        graphs.append(Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), x, y,
                            np.ones(n, dtype=bool), name=f"{name}/{gi}"))
    return GraphCollection(graphs, d, num_classes, False, name)
