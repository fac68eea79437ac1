"""Exact symmetric k-nearest-neighbor graph."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, StateError

GRAPH_MAGIC = b"CNEG"


@dataclass
class SkNNGraph:
    """Directed edge list of a symmetrized kNN graph.

    ``edges`` is an ``(E, 2)`` int array sorted lexicographically; every
    undirected neighbor relation appears in both directions.
    """

    n: int
    k: int
    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(GRAPH_MAGIC + struct.pack("<III", self.n, self.k, self.n_edges))
            fh.write(np.ascontiguousarray(self.edges, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "SkNNGraph":
        data = Path(path).read_bytes()
        if len(data) < 16 or data[:4] != GRAPH_MAGIC:
            raise FormatError(f"{path}: missing CNEG header")
        n, k, E = struct.unpack("<III", data[4:16])
        if len(data) - 16 != 8 * E:
            raise FormatError(f"{path}: expected {E} edges")
        edges = np.frombuffer(data, dtype="<u4", offset=16).reshape(E, 2).astype(np.int64)
        return cls(n=n, k=k, edges=edges)


def exact_knn(X, k: int, chunk: int = 256) -> np.ndarray:
    """Indices of the ``k`` nearest rows of every row, self excluded.

    Euclidean distances; equal distances are ordered by smaller index.
    Candidates are preselected with the Gram-matrix expansion and then
    re-ranked on directly computed squared differences, so rounding in the
    expansion cannot reorder exact ties.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ArgumentError(f"k must satisfy 1 <= k < n = {n}, got {k}")
    sq = np.einsum("ij,ij->i", X, X)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        approx = sq[rows, None] + sq[None, :] - 2.0 * (X[rows] @ X.T)
        approx[np.arange(rows.size), rows] = np.inf
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        slack = 1e-9 * (sq[rows] + sq.max()) + 1e-12
        for r, i in enumerate(rows):
            cand = np.flatnonzero(approx[r] <= kth[r] + slack[r])
            d2 = np.sum((X[cand] - X[i]) ** 2, axis=1)
            order = np.lexsort((cand, d2))
            out[i] = cand[order[:k]]
    return out


def build_sknn(X, k: int = 15) -> SkNNGraph:
    """Binary symmetric kNN graph over the rows of ``X`` (a matrix or DataMatrix)."""
    values = getattr(X, "values", X)
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    nbrs = exact_knn(values, k)
    heads = np.repeat(np.arange(n), k)
    tails = nbrs.ravel()
    both = np.concatenate([np.stack([heads, tails], 1), np.stack([tails, heads], 1)])
    edges = np.unique(both, axis=0)
    return SkNNGraph(n=n, k=k, edges=edges)


def edge_probability(g: SkNNGraph) -> float:
    """Uniform data probability ``1/E`` of every directed edge."""
    if g.n_edges == 0:
        raise StateError("graph has no edges")
    return 1.0 / g.n_edges


def complete_graph(n: int) -> SkNNGraph:
    """All ``n(n-1)`` directed pairs; the toy setting uses ``n = 3``."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = i != j
    return SkNNGraph(n=n, k=n - 1, edges=np.stack([i[mask], j[mask]], 1))
