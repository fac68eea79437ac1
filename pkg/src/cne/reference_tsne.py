"""Exact O(n^2) t-SNE on the uniform skNN affinities.

Only meant as a small-n oracle: plain gradient descent, no momentum or
gains, and an exact partition function at every iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DivergenceError, SizeError
from .knn_graph import SkNNGraph, edge_probability
from .model import partition_function

MAX_POINTS = 20_000
BLOCK = 512


@dataclass
class TsneConfig:
    iterations: int = 1000
    # None picks max(n / exaggeration, 50), the usual "auto" rate
    lr: float | None = None
    exaggeration: float = 12.0
    exag_iterations: int = 250

    def __post_init__(self):
        if self.iterations < 0:
            raise ArgumentError("iterations must be >= 0")
        if self.lr is not None and not self.lr > 0:
            raise ArgumentError("lr must be positive")
        if self.exaggeration < 1:
            raise ArgumentError("exaggeration must be >= 1")
        if not 0 <= self.exag_iterations <= self.iterations:
            raise ArgumentError("exag_iterations must lie in [0, iterations]")

    def resolved_lr(self, n: int) -> float:
        return self.lr if self.lr is not None else max(n / self.exaggeration, 50.0)


def _repulsion(coords):
    """Partition function and ``sum_j phi_ij^2 (e_i - e_j)`` per row."""
    n = coords.shape[0]
    rep = np.empty_like(coords)
    partial = []
    for start in range(0, n, BLOCK):
        rows = coords[start:start + BLOCK]
        diff = rows[:, None, :] - coords[None, :, :]
        phi = 1.0 / (1.0 + np.einsum("ijk,ijk->ij", diff, diff))
        phi[np.arange(rows.shape[0]), np.arange(start, start + rows.shape[0])] = 0.0
        partial.append(phi.sum())
        rep[start:start + BLOCK] = np.einsum("ij,ijk->ik", phi * phi, diff)
    return float(np.sum(partial)), rep


def tsne_loss(graph: SkNNGraph, coords, exag: float = 1.0) -> float:
    """``-exag * sum_ij p_ij log phi_ij + log Z`` with ``p = 1/E`` on edges."""
    coords = np.asarray(coords, dtype=np.float64)
    p = edge_probability(graph)
    h, t = graph.edges[:, 0], graph.edges[:, 1]
    d2 = np.sum((coords[h] - coords[t]) ** 2, axis=1)
    return float(exag * p * np.log1p(d2).sum() + math.log(partition_function(coords)))


def tsne_gradient(graph: SkNNGraph, coords, exag: float = 1.0) -> np.ndarray:
    """``4 sum_j (exag p_ij - phi_ij/Z) phi_ij (e_i - e_j)``."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != graph.n or coords.shape[0] < 2:
        raise ArgumentError("coords must have one row per graph node (n >= 2)")
    p = edge_probability(graph)
    Z, rep = _repulsion(coords)
    h, t = graph.edges[:, 0], graph.edges[:, 1]
    diff = coords[h] - coords[t]
    w = exag * p / (1.0 + np.einsum("ij,ij->i", diff, diff))
    attr = np.empty_like(coords)
    for k in range(coords.shape[1]):
        attr[:, k] = np.bincount(h, weights=w * diff[:, k], minlength=graph.n)
    return 4.0 * (attr - rep / Z)


def run_reference_tsne(graph: SkNNGraph, init, cfg: TsneConfig | None = None,
                       hook=None) -> tuple[np.ndarray, float]:
    """Gradient descent from ``init``; returns ``(coords, Z_tsne)``."""
    cfg = cfg or TsneConfig()
    coords = np.array(init, dtype=np.float64, copy=True)
    n = coords.shape[0]
    if n > MAX_POINTS:
        raise SizeError(f"reference t-SNE is limited to {MAX_POINTS} points, got {n}")
    if n != graph.n:
        raise ArgumentError(f"init has {n} rows, graph has {graph.n} nodes")
    lr = cfg.resolved_lr(n)
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exag_iterations else 1.0
        coords -= lr * tsne_gradient(graph, coords, exag)
        if not np.isfinite(coords).all():
            raise DivergenceError(f"non-finite t-SNE embedding at iteration {it}", epoch=it)
        if hook is not None:
            hook(it, coords)
    return coords, partition_function(coords)
