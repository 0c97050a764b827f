"""Graph containers, TU-format ingestion, distribution targets and batching."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DatasetFormatError(ValueError):
    """Raised for malformed TU files; carries the file name and line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        self.message = message
        where = f"{os.path.basename(self.path)}:{line}" if line else os.path.basename(self.path)
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected node-labelled graph.

    ``neighbors[v]`` is a sorted tuple of the neighbours of ``v``; the lists are
    symmetric and free of duplicates and self-loops.
    """

    neighbors: tuple[tuple[int, ...], ...]
    node_labels: np.ndarray
    graph_label: int
    num_node_classes: int

    def __post_init__(self):
        labels = np.asarray(self.node_labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "node_labels", labels)
        n = len(self.neighbors)
        if n < 1:
            raise ValueError("a graph needs at least one node")
        if labels.shape != (n,):
            raise ValueError(f"expected {n} node labels, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= self.num_node_classes:
            raise ValueError("node label outside 0..num_node_classes-1")
        for v, nbrs in enumerate(self.neighbors):
            if len(set(nbrs)) != len(nbrs):
                raise ValueError(f"duplicate neighbour of node {v}")
            for w in nbrs:
                if w == v:
                    raise ValueError(f"self-loop at node {v}")
                if not 0 <= w < n:
                    raise ValueError(f"neighbour {w} of node {v} out of range")
                if v not in self.neighbors[w]:
                    raise ValueError(f"asymmetric edge {v}->{w}")

    @property
    def node_count(self) -> int:
        return len(self.neighbors)

    @property
    def edge_count(self) -> int:
        """Number of undirected edges."""
        return sum(len(nbrs) for nbrs in self.neighbors) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nbrs) for nbrs in self.neighbors], dtype=np.int64)

    @property
    def features(self) -> np.ndarray:
        x = np.zeros((self.node_count, self.num_node_classes))
        x[np.arange(self.node_count), self.node_labels] = 1.0
        return x

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges as ``(v, w)`` pairs with ``v < w``."""
        return [(v, w) for v, nbrs in enumerate(self.neighbors) for w in nbrs if v < w]

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that old node ``v`` becomes ``perm[v]``."""
        perm = np.asarray(perm)
        n = self.node_count
        neighbors: list[list[int]] = [[] for _ in range(n)]
        for v, nbrs in enumerate(self.neighbors):
            neighbors[perm[v]] = sorted(int(perm[w]) for w in nbrs)
        labels = np.empty(n, dtype=np.int64)
        labels[perm] = self.node_labels
        return Graph(tuple(map(tuple, neighbors)), labels, self.graph_label, self.num_node_classes)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.neighbors == other.neighbors
            and np.array_equal(self.node_labels, other.node_labels)
            and self.graph_label == other.graph_label
            and self.num_node_classes == other.num_node_classes
        )

    __hash__ = None


def graph_from_edges(node_labels, edges, graph_label=0, num_node_classes=None) -> Graph:
    """Build a :class:`Graph` from an undirected edge list."""
    node_labels = np.asarray(node_labels, dtype=np.int64)
    n = len(node_labels)
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for v, w in edges:
        if v == w:
            raise ValueError(f"self-loop at node {v}")
        nbrs[v].add(w)
        nbrs[w].add(v)
    if num_node_classes is None:
        num_node_classes = int(node_labels.max()) + 1
    return Graph(tuple(tuple(sorted(s)) for s in nbrs), node_labels, int(graph_label), num_node_classes)


@dataclass(frozen=True)
class DistributionTargets:
    graph_node_distribution: np.ndarray  # (C_N,) node counts per class
    neighborhood_distributions: np.ndarray  # (n, C_N) neighbour counts per class


def compute_distribution_targets(g: Graph) -> DistributionTargets:
    c = g.num_node_classes
    d_g = np.bincount(g.node_labels, minlength=c).astype(np.int64)
    d_n = np.zeros((g.node_count, c), dtype=np.int64)
    for v, nbrs in enumerate(g.neighbors):
        for w in nbrs:
            d_n[v, g.node_labels[w]] += 1
    return DistributionTargets(d_g, d_n)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    graphs: tuple[Graph, ...]
    num_node_classes: int
    num_graph_classes: int
    name: str = "dataset"
    _targets: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if self.num_node_classes < 1 or self.num_graph_classes < 1:
            raise ValueError("datasets need at least one node class and one graph class")
        for i, g in enumerate(self.graphs):
            if g.num_node_classes != self.num_node_classes:
                raise ValueError(f"graph {i} disagrees on the number of node classes")
            if not 0 <= g.graph_label < self.num_graph_classes:
                raise ValueError(f"graph {i} label {g.graph_label} out of range")
        object.__setattr__(self, "_targets", [None] * len(self.graphs))

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i) -> Graph:
        return self.graphs[i]

    def __eq__(self, other):
        if not isinstance(other, GraphDataset):
            return NotImplemented
        return (
            self.num_node_classes == other.num_node_classes
            and self.num_graph_classes == other.num_graph_classes
            and self.graphs == other.graphs
        )

    __hash__ = None

    @property
    def graph_labels(self) -> np.ndarray:
        return np.array([g.graph_label for g in self.graphs], dtype=np.int64)

    def targets(self, i) -> DistributionTargets:
        cached = self._targets[i]
        if cached is None:
            cached = self._targets[i] = compute_distribution_targets(self.graphs[i])
        return cached

    def subset(self, ids: Sequence[int]) -> "GraphDataset":
        return GraphDataset([self.graphs[i] for i in ids], self.num_node_classes,
                            self.num_graph_classes, self.name)


@dataclass(frozen=True)
class DatasetStatistics:
    name: str
    num_graphs: int
    num_graph_classes: int
    num_node_classes: int
    avg_nodes: float
    avg_edges: float
    max_degree: int

    def row(self) -> str:
        return (f"{self.num_graphs} {self.num_graph_classes} {self.num_node_classes} "
                f"{self.avg_nodes:.2f} {self.avg_edges:.2f} {self.max_degree}")


def dataset_statistics(ds: GraphDataset) -> DatasetStatistics:
    nodes = np.array([g.node_count for g in ds.graphs])
    edges = np.array([g.edge_count for g in ds.graphs])
    return DatasetStatistics(
        name=ds.name,
        num_graphs=len(ds),
        num_graph_classes=ds.num_graph_classes,
        num_node_classes=ds.num_node_classes,
        avg_nodes=float(nodes.mean()),
        avg_edges=float(edges.mean()),
        max_degree=int(max(g.degrees.max() for g in ds.graphs)),
    )


# --------------------------------------------------------------------------
# TU format

def _read_column(path) -> list[tuple[int, int]]:
    """Return ``(line_number, int_value)`` for each non-blank line."""
    if not os.path.exists(path):
        raise DatasetFormatError(path, None, "file not found")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append((lineno, int(s)))
            except ValueError:
                raise DatasetFormatError(path, lineno, f"expected an integer, got {s!r}") from None
    return out


def _read_pairs(path) -> list[tuple[int, int, int]]:
    if not os.path.exists(path):
        raise DatasetFormatError(path, None, "file not found")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            parts = s.split(",")
            try:
                if len(parts) != 2:
                    raise ValueError
                out.append((lineno, int(parts[0]), int(parts[1])))
            except ValueError:
                raise DatasetFormatError(path, lineno, f"expected 'i, j', got {s!r}") from None
    return out


def _remap(values):
    distinct = sorted(set(values))
    index = {v: i for i, v in enumerate(distinct)}
    return [index[v] for v in values], distinct


def parse_tu_dataset(root_path, name: str) -> GraphDataset:
    """Load ``root_path/name/name_*.txt``.

    Raw node and graph labels are remapped to ``0..C-1`` by sorting their
    distinct values ascending. Each undirected edge is expected in both
    directions; the neighbour lists are deduplicated.
    """
    base = os.path.join(root_path, name)
    if not os.path.isdir(base):
        raise DatasetFormatError(base, None, "dataset directory not found")
    p_adj = os.path.join(base, f"{name}_A.txt")
    p_ind = os.path.join(base, f"{name}_graph_indicator.txt")
    p_gl = os.path.join(base, f"{name}_graph_labels.txt")
    p_nl = os.path.join(base, f"{name}_node_labels.txt")
    for p in (p_adj, p_ind, p_gl, p_nl):
        if not os.path.exists(p):
            raise DatasetFormatError(p, None, "file not found")

    indicator = _read_column(p_ind)
    graph_labels = _read_column(p_gl)
    node_labels = _read_column(p_nl)
    pairs = _read_pairs(p_adj)

    num_graphs = len(graph_labels)
    num_nodes = len(node_labels)
    if len(indicator) != num_nodes:
        line = indicator[num_nodes][0] if len(indicator) > num_nodes else None
        raise DatasetFormatError(
            p_ind, line, f"{len(indicator)} graph ids for {num_nodes} node labels")

    node_graph = np.empty(num_nodes, dtype=np.int64)
    for v, (lineno, gid) in enumerate(indicator):
        if not 1 <= gid <= num_graphs:
            raise DatasetFormatError(p_ind, lineno, f"graph id {gid} outside 1..{num_graphs}")
        node_graph[v] = gid - 1
    if np.any(np.diff(node_graph) < 0):
        bad = int(np.argmax(np.diff(node_graph) < 0)) + 1
        raise DatasetFormatError(p_ind, indicator[bad][0], "graph ids must be non-decreasing")
    members = np.bincount(node_graph, minlength=num_graphs)
    if np.any(members == 0):
        g = int(np.argmin(members))
        raise DatasetFormatError(p_gl, graph_labels[g][0], f"graph {g + 1} has no nodes")

    starts = np.concatenate([[0], np.cumsum(members)])
    nbrs: list[set[int]] = [set() for _ in range(num_nodes)]
    for lineno, i, j in pairs:
        for x in (i, j):
            if not 1 <= x <= num_nodes:
                raise DatasetFormatError(p_adj, lineno, f"unknown node {x}")
        a, b = i - 1, j - 1
        if a == b:
            raise DatasetFormatError(p_adj, lineno, f"self-loop at node {i}")
        if node_graph[a] != node_graph[b]:
            raise DatasetFormatError(p_adj, lineno, f"edge {i}, {j} joins two graphs")
        nbrs[a].add(b)
        nbrs[b].add(a)

    nl, _ = _remap([v for _, v in node_labels])
    gl, _ = _remap([v for _, v in graph_labels])
    c_n = max(nl) + 1
    c_g = max(gl) + 1
    nl = np.asarray(nl, dtype=np.int64)

    graphs = []
    for g in range(num_graphs):
        lo, hi = starts[g], starts[g + 1]
        neighbors = tuple(tuple(sorted(w - lo for w in nbrs[v])) for v in range(lo, hi))
        graphs.append(Graph(neighbors, nl[lo:hi], gl[g], c_n))
    return GraphDataset(graphs, c_n, c_g, name)


def write_tu_dataset(ds: GraphDataset, root_path, name: str | None = None) -> str:
    """Serialise ``ds`` to the TU layout (labels are written already remapped)."""
    name = name or ds.name
    base = os.path.join(root_path, name)
    os.makedirs(base, exist_ok=True)
    offset = 0
    with open(os.path.join(base, f"{name}_A.txt"), "w") as fa, \
            open(os.path.join(base, f"{name}_graph_indicator.txt"), "w") as fi, \
            open(os.path.join(base, f"{name}_node_labels.txt"), "w") as fn:
        for gid, g in enumerate(ds.graphs, 1):
            for v, nb in enumerate(g.neighbors):
                for w in nb:
                    fa.write(f"{v + offset + 1}, {w + offset + 1}\n")
                fi.write(f"{gid}\n")
                fn.write(f"{g.node_labels[v]}\n")
            offset += g.node_count
    with open(os.path.join(base, f"{name}_graph_labels.txt"), "w") as fg:
        for g in ds.graphs:
            fg.write(f"{g.graph_label}\n")
    return base


# --------------------------------------------------------------------------
# batching

@dataclass(frozen=True)
class Batch:
    """Disjoint union of several graphs.

    ``edge_src``/``edge_dst`` hold every directed edge ``w -> v`` (both
    orientations of each undirected edge) with node indices offset per graph;
    rows are sorted by destination.
    """

    graph_ids: tuple[int, ...]
    features: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    node_to_graph: np.ndarray
    node_labels: np.ndarray
    graph_labels: np.ndarray
    graph_distributions: np.ndarray
    neighborhood_distributions: np.ndarray
    _adjacency: object = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return len(self.node_to_graph)

    @property
    def num_graphs(self) -> int:
        return len(self.graph_ids)

    def adjacency(self, dtype=np.float64):
        """Sparse CSR adjacency of the union, ``A[v, w] = 1`` for ``w`` in ``N(v)``."""
        key = np.dtype(dtype).str
        if self._adjacency is None:
            object.__setattr__(self, "_adjacency", {})
        a = self._adjacency.get(key)
        if a is None:
            from scipy import sparse

            n = self.num_nodes
            a = sparse.csr_matrix(
                (np.ones(len(self.edge_src), dtype=dtype), (self.edge_dst, self.edge_src)),
                shape=(n, n))
            a.sort_indices()
            self._adjacency[key] = a
        return a

    def neighbor_table(self) -> np.ndarray:
        """``(num_nodes, max_degree)`` source indices per node, padded with ``num_nodes``."""
        if self._adjacency is None:
            object.__setattr__(self, "_adjacency", {})
        t = self._adjacency.get("table")
        if t is None:
            n = self.num_nodes
            deg = np.bincount(self.edge_dst, minlength=n)
            t = np.full((n, int(deg.max(initial=0))), n, dtype=np.int64)
            starts = np.concatenate([[0], np.cumsum(deg)[:-1]])
            slot = np.arange(len(self.edge_dst)) - starts[self.edge_dst]
            t[self.edge_dst, slot] = self.edge_src
            self._adjacency["table"] = t
        return t


def make_batch(ds: GraphDataset, ids: Sequence[int]) -> Batch:
    ids = [int(i) for i in ids]
    if not ids:
        raise ValueError("cannot batch an empty id list")
    for i in ids:
        if not 0 <= i < len(ds):
            raise IndexError(f"graph id {i} outside 0..{len(ds) - 1}")
    graphs = [ds.graphs[i] for i in ids]
    sizes = np.array([g.node_count for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    src, dst = [], []
    for g, off in zip(graphs, offsets):
        for v, nbrs in enumerate(g.neighbors):
            dst.extend([v + off] * len(nbrs))
            src.extend(w + off for w in nbrs)
    targets = [ds.targets(i) for i in ids]
    return Batch(
        graph_ids=tuple(ids),
        features=np.concatenate([g.features for g in graphs]),
        edge_src=np.asarray(src, dtype=np.int64),
        edge_dst=np.asarray(dst, dtype=np.int64),
        node_to_graph=np.repeat(np.arange(len(ids)), sizes),
        node_labels=np.concatenate([g.node_labels for g in graphs]),
        graph_labels=np.array([g.graph_label for g in graphs], dtype=np.int64),
        graph_distributions=np.stack([t.graph_node_distribution for t in targets]).astype(float),
        neighborhood_distributions=np.concatenate(
            [t.neighborhood_distributions for t in targets]).astype(float),
    )


# --------------------------------------------------------------------------
# cross-validation splits

@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[int, ...]
    validation_ids: tuple[int, ...]


def stratified_kfold(ds: GraphDataset, k: int = 10, seed: int = 0) -> list[FoldSplit]:
    """Seeded stratified split.

    Graphs of each class are shuffled, the classes are concatenated and the
    result is dealt round-robin over the folds, so both fold sizes and per-class
    fold counts differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    labels = ds.graph_labels
    counts = np.bincount(labels, minlength=ds.num_graph_classes)
    for c, n in enumerate(counts):
        if n < k:
            raise ValueError(f"graph class {c} has {n} members, fewer than k={k}")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c))
                            for c in range(ds.num_graph_classes)])
    fold_of = np.empty(len(ds), dtype=np.int64)
    fold_of[order] = np.arange(len(ds)) % k
    splits = []
    for f in range(k):
        val = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        splits.append(FoldSplit(f, tuple(int(i) for i in train), tuple(int(i) for i in val)))
    return splits


# --------------------------------------------------------------------------
# synthetic fixtures

@dataclass(frozen=True)
class ToySpec:
    """Per-class node-label compositions for :func:`generate_toy_dataset`.

    ``motifs[c][l]`` is the number of nodes with label ``l`` in every graph of
    class ``c``. Each graph is a random spanning tree over its nodes plus each
    remaining pair joined with probability ``extra_edge_prob``.
    """

    graphs_per_class: int = 10
    motifs: tuple[tuple[int, ...], ...] = ((2, 2), (1, 3))
    extra_edge_prob: float = 0.2

    def replace(self, **kw) -> "ToySpec":
        return dataclasses.replace(self, **kw)


def generate_toy_dataset(spec: ToySpec = ToySpec(), seed: int = 0) -> GraphDataset:
    if not spec.motifs:
        raise ValueError("toy spec needs at least one class")
    if spec.graphs_per_class < 1:
        raise ValueError("toy spec needs at least one graph per class")
    widths = {len(m) for m in spec.motifs}
    if len(widths) != 1:
        raise ValueError("every motif must list counts for the same node labels")
    c_n = widths.pop()
    if c_n == 0 or any(sum(m) == 0 or min(m) < 0 for m in spec.motifs):
        raise ValueError("every motif needs a non-negative count vector with at least one node")
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(spec.graphs_per_class):
        for cls, motif in enumerate(spec.motifs):
            labels = rng.permutation(np.repeat(np.arange(c_n), motif))
            n = len(labels)
            edges = {(int(rng.integers(v)), v) for v in range(1, n)}
            for v in range(n):
                for w in range(v + 1, n):
                    if (v, w) not in edges and rng.random() < spec.extra_edge_prob:
                        edges.add((v, w))
            graphs.append(graph_from_edges(labels, sorted(edges), cls, c_n))
    return GraphDataset(graphs, c_n, len(spec.motifs), "toy")
