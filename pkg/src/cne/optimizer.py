"""Batched SGD over directed kNN edges with in-batch negative sampling.

One epoch shuffles the directed edge list, cuts it into batches of ``b``
edges (the last batch may be shorter) and, for every batch, draws ``m``
negative tails per edge from the ``2b`` head/tail slots of that batch, minus
the slot holding the edge's own head.  The summed batch loss is minimized with
one plain gradient step per batch.

An optional early-exaggeration phase precedes the main phase: NEG runs use
``zbar = n(n-1)/m`` and NCE/InfoNCE runs use ``m = 5`` during it, and the
learning-rate annealing restarts when the main phase begins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import ArgumentError, DivergenceError, SamplingError
from .knn_graph import SkNNGraph, complete_graph
from .model import LossSpec, Mode, batch_gradient, partition_function

EXAGGERATION_M = 5
Z_FLOOR = 1e-12


@dataclass
class OptimizerConfig:
    epochs: int = 750
    batch_size: int = 1024
    lr: float = 1.0
    anneal: str = "linear"
    early_exag_epochs: int = 250
    seed: int = 0
    z_lr: float | None = None
    # False reproduces a single annealing ramp over all epochs
    anneal_reset: bool = True
    # "node": a head never draws itself; "slot": only the head's own slot is excluded
    negatives: str = "node"

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.lr < 0:
            raise ArgumentError("lr must be non-negative")
        if self.anneal not in ("linear", "none"):
            raise ArgumentError(f"anneal must be 'linear' or 'none', got {self.anneal!r}")
        if self.early_exag_epochs < 0 or (self.early_exag_epochs and self.early_exag_epochs >= self.epochs):
            raise ArgumentError("early_exag_epochs must be smaller than epochs")
        if self.z_lr is not None and self.z_lr < 0:
            raise ArgumentError("z_lr must be non-negative")
        if self.negatives not in ("node", "slot"):
            raise ArgumentError(f"negatives must be 'node' or 'slot', got {self.negatives!r}")


@dataclass
class EmbeddingState:
    coords: np.ndarray
    Z: float | None = None
    epoch: int = 0


@dataclass
class EpochInfo:
    epoch: int
    phase: str
    lr: float
    loss: float
    m: int
    zbar: float | None
    Z: float | None
    partition: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------

def lr_schedule(cfg: OptimizerConfig, epoch: int, phase_len: int, base: float | None = None) -> float:
    """Learning rate at ``epoch`` (counted from the start of its phase)."""
    eta = cfg.lr if base is None else base
    if cfg.anneal == "none":
        return eta
    return eta * (1.0 - epoch / phase_len)


def phase_position(cfg: OptimizerConfig, epoch: int) -> tuple[str, int, int]:
    """Return ``(phase, epoch within its annealing ramp, ramp length)``."""
    ee = cfg.early_exag_epochs
    phase = "early" if epoch < ee else "main"
    if not cfg.anneal_reset:
        return phase, epoch, cfg.epochs
    if phase == "early":
        return phase, epoch, ee
    return phase, epoch - ee, cfg.epochs - ee


def effective_spec(spec: LossSpec, phase: str) -> LossSpec:
    if phase != "early":
        return spec
    if spec.mode is Mode.NEG:
        return spec.replace(zbar=spec.n_ordered_pairs / spec.m)
    if spec.mode in (Mode.NCE, Mode.INFONCE):
        return spec.replace(m=EXAGGERATION_M)
    return spec


def zbar_from_slider(n: int, m: int, s: float, anchor: float | None = None) -> float:
    """Fixed normalization for slider position ``s``, unordered-pair units.

    ``s = 1`` gives ``n(n-1)/(2m)``; ``s = 0`` gives ``anchor`` (a t-SNE
    partition function, default proxy ``100 n``).  Values in between and
    beyond are interpolated geometrically.
    """
    if n < 2 or m < 1:
        raise ArgumentError("need n >= 2 and m >= 1")
    lo = 100.0 * n if anchor is None else float(anchor)
    if not lo > 0:
        raise ArgumentError("slider anchor must be positive")
    hi = n * (n - 1) / (2.0 * m)
    if s == 1:
        return hi
    if s == 0:
        return lo
    return math.exp((1.0 - s) * math.log(lo) + s * math.log(hi))


def equilibrium_distance_toy(zbar: float) -> float:
    """Pairwise distance at which three equidistant points have partition ``zbar``."""
    if not 0 < zbar <= 6:
        raise ArgumentError("three points can only match 0 < zbar <= 6")
    return math.sqrt(6.0 / zbar - 1.0)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,)))


def draw_negative_tails(heads, tails, m: int, rng: np.random.Generator,
                        exclude: str = "node") -> np.ndarray:
    """Negative tails for every edge of one or many batches.

    ``heads`` and ``tails`` have shape ``(..., b)``; the result has shape
    ``(..., b, m)``.  Candidates for edge ``beta`` are the ``2b`` head/tail
    slots of its batch.  ``exclude="slot"`` removes only slot ``beta`` (the
    edge's own head), so other occurrences of the head node may still be
    drawn and give futile pairs ``(i, i)``.  ``exclude="node"`` removes every
    slot holding the head node; draws are uniform over the remaining slots.
    """
    heads = np.asarray(heads)
    tails = np.asarray(tails)
    b = heads.shape[-1]
    nodes = np.concatenate([heads, tails], axis=-1)
    lead = heads.shape[:-1]
    u = rng.integers(0, 2 * b - 1, size=lead + (b, m))
    slot = u + (u >= np.arange(b)[:, None])
    negs = np.take_along_axis(nodes, slot.reshape(lead + (b * m,)), axis=-1).reshape(lead + (b, m))
    if exclude == "slot":
        return negs
    if exclude != "node":
        raise ArgumentError(f"exclude must be 'node' or 'slot', got {exclude!r}")
    # rejection keeps the draw uniform over the slots not holding the head node
    bad = np.nonzero(negs == heads[..., None])
    while bad[0].size:
        beta = bad[-2]
        u = rng.integers(0, 2 * b - 1, size=beta.size)
        u = u + (u >= beta)
        redrawn = nodes[bad[:-2] + (u,)]
        negs[bad] = redrawn
        keep = redrawn == heads[bad[:-1]]
        bad = tuple(ix[keep] for ix in bad)
    return negs


def sample_negatives(batch_nodes, head, m: int, rng: np.random.Generator,
                     exclude: str = "node") -> np.ndarray:
    """Draw ``m`` tails uniformly from the batch multiset without the head.

    With ``exclude="node"`` every occurrence of ``head`` is removed from the
    pool, with ``exclude="slot"`` a single one.
    """
    pool = list(np.asarray(batch_nodes).ravel())
    if head not in pool:
        raise ArgumentError(f"head {head} does not occur in the batch")
    if exclude == "node":
        pool = [v for v in pool if v != head]
    elif exclude == "slot":
        pool.remove(head)
    else:
        raise ArgumentError(f"exclude must be 'node' or 'slot', got {exclude!r}")
    if not pool:
        raise SamplingError("batch contains no candidate besides the head itself")
    pool = np.asarray(pool)
    return pool[rng.integers(0, pool.size, size=m)]


def epoch_batches(graph: SkNNGraph, batch_size: int, m: int, rng: np.random.Generator,
                  exclude: str = "node") -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Shuffle the directed edges once and yield ``(heads, tails, negatives)`` per batch."""
    E = graph.n_edges
    order = rng.permutation(E)
    edges = graph.edges[order]
    n_full = E // batch_size
    full = edges[: n_full * batch_size].reshape(n_full, batch_size, 2)
    negs_full = draw_negative_tails(full[..., 0], full[..., 1], m, rng, exclude)
    for bi in range(n_full):
        yield full[bi, :, 0], full[bi, :, 1], negs_full[bi]
    rest = edges[n_full * batch_size:]
    if len(rest):
        yield rest[:, 0], rest[:, 1], draw_negative_tails(rest[:, 0], rest[:, 1], m, rng, exclude)


def noise_distribution(graph: SkNNGraph, batch_size: int) -> np.ndarray:
    """Expected negative-pair distribution of slot-excluding in-batch sampling.

    Entry ``[i, j]`` is the probability that a drawn negative pair is
    ``(i, j)``, diagonal included.  Exact when ``batch_size`` divides ``E``.
    """
    E, b = graph.n_edges, batch_size
    p_ij = np.zeros((graph.n, graph.n))
    p_ij[graph.edges[:, 0], graph.edges[:, 1]] = 1.0 / E
    p_i = p_ij.sum(axis=1)
    shrink = (E - b) / (E - 1)
    xi = (shrink * p_ij + 2.0 * (b - shrink) * np.outer(p_i, p_i)) / (2 * b - 1)
    diag = (-(b - 1) / (E - 1) * p_i + 2.0 * (b - shrink) * p_i**2) / (2 * b - 1)
    xi[np.diag_indices(graph.n)] = diag
    return xi


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class BatchPlan:
    """Everything one trainer step needs, shared by both trainers."""

    epoch: int
    batch: int
    phase: str
    spec: LossSpec
    lr: float
    z_lr: float
    heads: np.ndarray
    tails: np.ndarray
    negs: np.ndarray


def iter_plan(graph: SkNNGraph, spec: LossSpec, cfg: OptimizerConfig,
              start_epoch: int = 0) -> Iterator[BatchPlan]:
    for epoch in range(start_epoch, cfg.epochs):
        phase, t, length = phase_position(cfg, epoch)
        spec_e = effective_spec(spec, phase)
        lr = lr_schedule(cfg, t, length)
        z_lr = lr_schedule(cfg, t, length, base=cfg.lr if cfg.z_lr is None else cfg.z_lr)
        rng = epoch_rng(cfg.seed, epoch)
        for bi, (h, tl, negs) in enumerate(epoch_batches(graph, cfg.batch_size, spec_e.m, rng, cfg.negatives)):
            yield BatchPlan(epoch, bi, phase, spec_e, lr, z_lr, h, tl, negs)


def update_log_z(Z: float, dZ: float, n_edges: int, z_lr: float) -> float:
    """One descent step on ``log Z`` using the gradient per positive edge."""
    step = z_lr * Z * dZ / n_edges
    return max(Z * math.exp(-step), Z_FLOOR)


def _epoch_info(plan: BatchPlan, loss, coords, Z, track_partition) -> EpochInfo:
    return EpochInfo(
        epoch=plan.epoch, phase=plan.phase, lr=plan.lr, loss=loss, m=plan.spec.m,
        zbar=plan.spec.zbar if plan.spec.mode is Mode.NEG else None,
        Z=Z if plan.spec.mode is Mode.NCE else None,
        partition=partition_function(coords) if track_partition else None,
    )


def run_training(graph: SkNNGraph, init: EmbeddingState, spec: LossSpec, cfg: OptimizerConfig,
                 hook: Callable[[EpochInfo], None] | None = None,
                 track_partition: bool = False) -> EmbeddingState:
    """Non-parametric training; returns the final coordinates (and Z in NCE mode)."""
    coords = np.array(init.coords, dtype=np.float64, copy=True)
    if coords.shape[0] != graph.n:
        raise ArgumentError(f"init has {coords.shape[0]} rows, graph has {graph.n} nodes")
    if spec.n != graph.n:
        raise ArgumentError("spec.n does not match the graph")
    nce = spec.mode is Mode.NCE
    Z = (init.Z if init.Z is not None else 1.0) if nce else None

    epoch_loss = 0.0
    last = None
    for plan in iter_plan(graph, spec, cfg, start_epoch=init.epoch):
        if last is not None and plan.epoch != last.epoch:
            if hook is not None:
                hook(_epoch_info(last, epoch_loss, coords, Z, track_partition))
            epoch_loss = 0.0
        if nce and plan.batch == 0 and plan.epoch == cfg.early_exag_epochs and plan.epoch > 0:
            Z = 1.0
        bg = batch_gradient(plan.spec, coords, plan.heads, plan.tails, plan.negs, Z)
        with np.errstate(over="ignore", invalid="ignore"):
            coords -= plan.lr * bg.grad
        if nce:
            Z = update_log_z(Z, bg.dZ, plan.heads.size, plan.z_lr)
        if not np.isfinite(coords).all() or not math.isfinite(bg.loss):
            raise DivergenceError(
                f"non-finite embedding at epoch {plan.epoch}, batch {plan.batch}",
                epoch=plan.epoch, batch=plan.batch)
        epoch_loss += bg.loss
        last = plan
    if last is not None and hook is not None:
        hook(_epoch_info(last, epoch_loss, coords, Z, track_partition))
    return EmbeddingState(coords=coords, Z=Z, epoch=cfg.epochs)


def run_toy(zbar: float, seed: int = 0, epochs: int = 2000, lr: float = 0.01, m: int = 5,
            hook=None) -> EmbeddingState:
    """Three points with every directed pair an edge, NEG loss, one batch per epoch."""
    graph = complete_graph(3)
    init = np.random.default_rng(seed).normal(size=(3, 2))
    spec = LossSpec(mode=Mode.NEG, n=3, zbar=zbar, m=m)
    cfg = OptimizerConfig(epochs=epochs, batch_size=6, lr=lr, early_exag_epochs=0, seed=seed)
    return run_training(graph, EmbeddingState(init), spec, cfg, hook=hook)
