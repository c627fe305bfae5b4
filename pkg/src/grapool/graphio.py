"""TUDataset parsing, feature imputation, splits and batch orderings.

Shuffles use SplitMix64 (Steele, Lea & Flood 2014) so that splits can be
reproduced by any implementation:

    state += 0x9E3779B97F4A7C15              (mod 2**64)
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB (mod 2**64)
    return z ^ (z >> 31)

A permutation of ``n`` items is the Fisher-Yates shuffle of ``0..n-1``:
for ``i`` from ``n-1`` down to 1, draw ``j = next() % (i + 1)`` and swap
positions ``i`` and ``j``.  The per-epoch batch order seeds a fresh
generator with ``mix64(seed ^ mix64(epoch + 1))`` where ``mix64`` is the
output function above applied to its argument directly.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class DatasetFormatError(ValueError):
    pass


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def permutation(self, n: int) -> list[int]:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next() % (i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


@dataclass(frozen=True, eq=False)
class GraphInstance:
    adjacency: np.ndarray
    features: np.ndarray
    label: int

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def permuted(self, perm: Sequence[int]) -> "GraphInstance":
        """Relabel nodes: new node ``i`` is old node ``perm[i]``."""
        p = np.asarray(perm)
        return GraphInstance(self.adjacency[np.ix_(p, p)], self.features[p], self.label)


@dataclass
class GraphDataset:
    name: str
    graphs: list[GraphInstance]
    num_classes: int
    feature_dim: int
    label_values: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i: int) -> GraphInstance:
        return self.graphs[i]

    def stats(self) -> dict:
        nodes = np.array([g.num_nodes for g in self.graphs], dtype=float)
        edges = np.array([g.num_edges for g in self.graphs], dtype=float)
        return {
            "graphs": len(self.graphs),
            "nodes_mean": nodes.mean(),
            "nodes_std": nodes.std(),
            "edges_mean": edges.mean(),
            "edges_std": edges.std(),
            "features": self.feature_dim,
            "classes": self.num_classes,
        }


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train: list[int]
    val: list[int]
    test: list[int]
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


def _read_int_file(path: Path, ncols: int | None = None) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vals = [int(v) for v in line.split(",")]
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: {exc}") from None
            if ncols is not None and len(vals) != ncols:
                raise DatasetFormatError(
                    f"{path.name}:{lineno}: expected {ncols} values, got {len(vals)}"
                )
            rows.append(vals)
    return np.array(rows, dtype=np.int64).reshape(len(rows), -1)


def _read_float_file(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: {exc}") from None
    return np.array(rows, dtype=np.float64)


def resolve_dataset_dir(root: str | os.PathLike, name: str) -> Path:
    """Find the directory holding ``name``'s files under ``root``.

    Accepts ``root`` itself, ``root/name`` and ``root/name/raw``.
    """
    root = Path(root)
    for cand in (root, root / name, root / name / "raw"):
        if (cand / f"{name}_A.txt").is_file():
            return cand
    raise FileNotFoundError(f"dataset {name!r} not found under {root}")


def impute_features(num_nodes: int) -> np.ndarray:
    """Constant 1.0 feature for datasets without node labels or attributes."""
    return np.ones((num_nodes, 1))


def parse_tudataset(directory: str | os.PathLike, name: str) -> GraphDataset:
    directory = Path(directory)

    def path(suffix):
        return directory / f"{name}_{suffix}.txt"

    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not path(suffix).is_file():
            raise FileNotFoundError(f"missing mandatory file {path(suffix)}")

    indicator = _read_int_file(path("graph_indicator"), 1)[:, 0]
    graph_labels = _read_int_file(path("graph_labels"), 1)[:, 0]
    edges = _read_int_file(path("A"), 2)
    num_nodes = len(indicator)
    num_graphs = len(graph_labels)

    if num_nodes == 0:
        raise DatasetFormatError(f"{name}: empty graph indicator")
    if indicator.min() < 1 or indicator.max() > num_graphs:
        bad = int(np.argmax((indicator < 1) | (indicator > num_graphs)))
        raise DatasetFormatError(
            f"{path('graph_indicator').name}:{bad + 1}: graph id {indicator[bad]} "
            f"outside 1..{num_graphs}"
        )

    node_labels = path("node_labels")
    node_attrs = path("node_attributes")
    blocks = []
    if node_labels.is_file():
        nl = _read_int_file(node_labels)[:, 0]
        if len(nl) != num_nodes:
            raise DatasetFormatError(f"{node_labels.name}: {len(nl)} lines for {num_nodes} nodes")
        values, inverse = np.unique(nl, return_inverse=True)
        blocks.append(np.eye(len(values))[inverse])
    if node_attrs.is_file():
        na = _read_float_file(node_attrs)
        if len(na) != num_nodes:
            raise DatasetFormatError(f"{node_attrs.name}: {len(na)} lines for {num_nodes} nodes")
        blocks.append(na)
    features = np.hstack(blocks) if blocks else None

    # nodes of each graph are contiguous in TU files, but don't rely on it
    gid = indicator - 1
    order = np.argsort(gid, kind="stable")
    counts = np.bincount(gid, minlength=num_graphs)
    local = np.empty(num_nodes, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local[order] = np.arange(num_nodes) - np.repeat(starts, counts)

    adjs = [np.zeros((c, c)) for c in counts]
    if len(edges):
        src, dst = edges[:, 0] - 1, edges[:, 1] - 1
        oob = (src < 0) | (src >= num_nodes) | (dst < 0) | (dst >= num_nodes)
        if oob.any():
            line = int(np.argmax(oob)) + 1
            raise DatasetFormatError(f"{path('A').name}:{line}: node index out of range")
        cross = gid[src] != gid[dst]
        if cross.any():
            line = int(np.argmax(cross)) + 1
            raise DatasetFormatError(
                f"{path('A').name}:{line}: edge joins nodes of graphs "
                f"{gid[src[line - 1]] + 1} and {gid[dst[line - 1]] + 1}"
            )
        for s, d in zip(src, dst):
            if s == d:
                continue
            a = adjs[gid[s]]
            a[local[s], local[d]] = 1.0
            a[local[d], local[s]] = 1.0

    label_values, remapped = np.unique(graph_labels, return_inverse=True)
    graphs = []
    for g in range(num_graphs):
        nodes = order[starts[g] : starts[g] + counts[g]]
        if counts[g] == 0:
            raise DatasetFormatError(f"{name}: graph {g + 1} has no nodes")
        x = features[nodes] if features is not None else impute_features(int(counts[g]))
        graphs.append(GraphInstance(adjs[g], x, int(remapped[g])))

    ds = GraphDataset(
        name=name,
        graphs=graphs,
        num_classes=len(label_values),
        feature_dim=graphs[0].features.shape[1],
        label_values=label_values.tolist(),
    )
    log.info("parsed %s: %d graphs, %d classes, F=%d", name, len(ds), ds.num_classes, ds.feature_dim)
    return ds


def load_dataset(name: str, root: str | os.PathLike | None = None) -> GraphDataset:
    if root is None:
        root = os.environ.get("GRAPOOL_DATA_DIR", "data")
    return parse_tudataset(resolve_dataset_dir(root, name), name)


def write_tudataset(dataset: GraphDataset, directory: str | os.PathLike) -> Path:
    """Write ``dataset`` in TU flat-file format (features as node attributes)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = dataset.name
    offset = 0
    with open(directory / f"{name}_A.txt", "w") as fa, open(
        directory / f"{name}_graph_indicator.txt", "w"
    ) as fi, open(directory / f"{name}_graph_labels.txt", "w") as fl, open(
        directory / f"{name}_node_attributes.txt", "w"
    ) as fx:
        for g, graph in enumerate(dataset.graphs, 1):
            for i, j in zip(*np.nonzero(graph.adjacency)):
                fa.write(f"{offset + i + 1}, {offset + j + 1}\n")
            for row in graph.features:
                fi.write(f"{g}\n")
                fx.write(", ".join(repr(float(v)) for v in row) + "\n")
            fl.write(f"{graph.label}\n")
            offset += graph.num_nodes
    return directory


def split_dataset(dataset_or_size, seed: int) -> SplitSpec:
    """80/10/10 split of a seeded permutation; the remainder goes to train."""
    n = dataset_or_size if isinstance(dataset_or_size, int) else len(dataset_or_size)
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    perm = SplitMix64(seed).permutation(n)
    n_val = math.floor(0.1 * n)
    n_test = math.floor(0.1 * n)
    if n < 10:
        warnings.warn(f"dataset has only {n} graphs; forcing one graph per partition")
        if n < 3:
            raise ValueError(f"need at least 3 graphs to split, got {n}")
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    return SplitSpec(
        seed=seed,
        train=sorted(perm[:n_train]),
        val=sorted(perm[n_train : n_train + n_val]),
        test=sorted(perm[n_train + n_val :]),
    )


def batch_iter(
    indices: Sequence[int], batch_size: int = 64, seed: int = 0, epoch: int = 0
) -> Iterator[list[int]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    indices = list(indices)
    rng = SplitMix64(mix64(seed ^ mix64(epoch + 1)))
    order = [indices[i] for i in rng.permutation(len(indices))]
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def synthetic_clique_cycle(
    num_graphs: int = 200, min_nodes: int = 10, max_nodes: int = 20, seed: int = 0
) -> GraphDataset:
    """Two-class toy set: complete graphs (class 0) and cycles (class 1).

    Node features are one-hot node degrees over ``0..max_nodes - 1``.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for g in range(num_graphs):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        label = g % 2
        if label == 0:
            adj = np.ones((n, n)) - np.eye(n)
        else:
            adj = np.zeros((n, n))
            for i in range(n):
                adj[i, (i + 1) % n] = adj[(i + 1) % n, i] = 1.0
        x = np.eye(max_nodes)[adj.sum(axis=1).astype(int)]
        graphs.append(GraphInstance(adj, x, label))
    return GraphDataset("SYNTH_CLIQUE_CYCLE", graphs, 2, max_nodes, [0, 1])
