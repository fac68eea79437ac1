import math

import numpy as np
import pytest

from cne.data_io import make_blobs, pca_init
from cne.errors import ArgumentError, SizeError
from cne.knn_graph import SkNNGraph, build_sknn, complete_graph
from cne.model import LossSpec, Mode, partition_function
from cne.optimizer import EmbeddingState, OptimizerConfig, run_training
from cne.reference_tsne import TsneConfig, run_reference_tsne, tsne_gradient, tsne_loss

from conftest import central_difference


def dense_loss(graph, coords, exag=1.0):
    """Expected negative log-likelihood written with a dense kernel matrix."""
    n = coords.shape[0]
    d2 = ((coords[:, None] - coords[None]) ** 2).sum(-1)
    phi = 1 / (1 + d2)
    np.fill_diagonal(phi, 0)
    P = np.zeros((n, n))
    P[graph.edges[:, 0], graph.edges[:, 1]] = 1 / graph.n_edges
    mask = P > 0
    return float(-exag * np.sum(P[mask] * np.log(phi[mask])) + math.log(phi.sum()))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    g = build_sknn(rng.normal(size=(10, 4)), 3)
    coords = rng.normal(size=(10, 2))
    exag = [1.0, 12.0][seed % 2]
    assert tsne_loss(g, coords, exag) == pytest.approx(dense_loss(g, coords, exag), rel=1e-12)
    fd = central_difference(lambda x: dense_loss(g, x, exag), coords)
    an = tsne_gradient(g, coords, exag)
    assert np.linalg.norm(an - fd) <= 1e-5 * np.linalg.norm(an)


def test_two_point_antisymmetry():
    g = SkNNGraph(n=2, k=1, edges=[(0, 1), (1, 0)])
    coords = np.array([[1e-6, 0.0], [-1e-6, 0.0]])
    grad = tsne_gradient(g, coords)
    np.testing.assert_allclose(grad[0], -grad[1], atol=1e-20)
    swapped = tsne_gradient(g, coords[::-1])
    np.testing.assert_allclose(swapped, grad[::-1], atol=1e-20)


def test_translation_invariance():
    rng = np.random.default_rng(0)
    g = build_sknn(rng.normal(size=(30, 3)), 4)
    c = rng.normal(size=(30, 2))
    np.testing.assert_allclose(tsne_gradient(g, c + [5.0, -3.0]), tsne_gradient(g, c), atol=1e-9)


def test_zero_iterations_returns_init():
    g = complete_graph(4)
    init = np.random.default_rng(0).normal(size=(4, 2))
    coords, Z = run_reference_tsne(g, init, TsneConfig(iterations=0, exag_iterations=0))
    assert np.array_equal(coords, init) and Z == partition_function(init)


def test_size_guard():
    with pytest.raises(SizeError):
        run_reference_tsne(complete_graph(3), np.zeros((20_001, 2)), TsneConfig(iterations=1, exag_iterations=0))


def test_config_validation():
    with pytest.raises(ArgumentError):
        TsneConfig(iterations=10, exag_iterations=20)
    with pytest.raises(ArgumentError):
        TsneConfig(exaggeration=0.5)


def test_toy_stationary_point():
    """On the complete 3-point graph every equilateral triangle is stationary."""
    g = complete_graph(3)
    init = np.array([[0.0, 0.0], [0.7, 0.1], [0.2, 0.9]])
    coords, Z = run_reference_tsne(g, init, TsneConfig(iterations=3000, lr=1.0, exag_iterations=0))
    assert np.linalg.norm(tsne_gradient(g, coords)) < 1e-8
    d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))[np.triu_indices(3, 1)]
    assert d.max() - d.min() < 1e-6
    assert math.isfinite(Z) and Z > 0


def test_loss_non_increasing_on_blobs():
    X = make_blobs(n=200, seed=1)
    g = build_sknn(X, 15)
    losses = []
    run_reference_tsne(g, pca_init(X, 2, 1e-4), TsneConfig(iterations=200, exag_iterations=0, lr=20.0),
                       hook=lambda it, c: losses.append(tsne_loss(g, c)))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


@pytest.mark.slow
def test_blobs_partition_range_and_neg_match():
    n = 500
    X = make_blobs(n=n, seed=0)
    g = build_sknn(X, 15)
    _, z_tsne = run_reference_tsne(g, pca_init(X, 2, 1e-4))
    assert 10 * n <= z_tsne <= 1000 * n
    c = run_training(g, EmbeddingState(pca_init(X)), LossSpec(Mode.NEG, n=n, zbar=z_tsne),
                     OptimizerConfig()).coords
    assert 0.5 <= partition_function(c) / z_tsne <= 2.0
