"""Embedding quality measurements."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import rankdata

from .errors import ArgumentError
from .knn_graph import SkNNGraph, edge_probability, exact_knn
from .model import partition_function

SPEARMAN_SAMPLE = 5000


def _matrix(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def knn_recall(reference, emb, k: int = 15) -> float:
    """Mean fraction of each point's ``k`` reference neighbors kept in ``emb``."""
    ref, emb = _matrix(reference), _matrix(emb)
    if ref.shape[0] != emb.shape[0]:
        raise ArgumentError(f"reference has {ref.shape[0]} rows, embedding has {emb.shape[0]}")
    a = exact_knn(ref, k)
    b = exact_knn(emb, k)
    hits = sum(np.intersect1d(a[i], b[i], assume_unique=True).size for i in range(a.shape[0]))
    return hits / (a.shape[0] * k)


def spearman_distance_corr(reference, emb, sample_size: int = SPEARMAN_SAMPLE,
                           seed: int = 0) -> float:
    """Spearman correlation of pairwise distances over a seeded subsample.

    Ties get average ranks.  With ``sample_size >= n`` every point is used
    and the seed is irrelevant.
    """
    ref, emb = _matrix(reference), _matrix(emb)
    n = ref.shape[0]
    if emb.shape[0] != n:
        raise ArgumentError(f"reference has {n} rows, embedding has {emb.shape[0]}")
    if n < 2:
        raise ArgumentError("need at least two points")
    size = min(int(sample_size), n)
    if size < n:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
        ref, emb = ref[idx], emb[idx]
    ra = rankdata(pdist(ref))
    rb = rankdata(pdist(emb))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return float("nan")
    return float(ra @ rb) / denom


def kl_divergence(graph: SkNNGraph, coords) -> float:
    """KL of the uniform edge distribution to the normalized Cauchy model."""
    coords = _matrix(coords)
    p = edge_probability(graph)
    h, t = graph.edges[:, 0], graph.edges[:, 1]
    d2 = np.sum((coords[h] - coords[t]) ** 2, axis=1)
    log_q = -np.log1p(d2) - math.log(partition_function(coords))
    return max(float(np.sum(p * (math.log(p) - log_q))), 0.0)


def blob_purity(emb, labels) -> float:
    """Nearest-centroid label accuracy in the embedding."""
    emb = _matrix(emb)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centroids = np.stack([emb[labels == c].mean(axis=0) for c in classes])
    d2 = ((emb[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(classes[np.argmin(d2, axis=1)] == labels))


def rms_distance(emb) -> float:
    """Root mean square of all pairwise embedding distances."""
    return float(np.sqrt(np.mean(pdist(_matrix(emb), "sqeuclidean"))))


@dataclass
class MetricsReport:
    knn_recall: float
    spearman: float
    partition_function: float
    kl_divergence: float | None
    k: int
    sample_size: int
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)


def compute_report(reference, emb, graph: SkNNGraph | None = None, k: int = 15,
                   sample_size: int = SPEARMAN_SAMPLE, seed: int = 0) -> MetricsReport:
    emb = _matrix(emb)
    return MetricsReport(
        knn_recall=knn_recall(reference, emb, k),
        spearman=spearman_distance_corr(reference, emb, sample_size, seed),
        partition_function=partition_function(emb),
        kl_divergence=kl_divergence(graph, emb) if graph is not None else None,
        k=k,
        sample_size=min(sample_size, emb.shape[0]),
        seed=seed,
    )
