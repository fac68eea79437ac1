"""Parametric embeddings: an MLP maps data rows to embedding coordinates.

The network is trained with the same batches, per-pair gradients and
learning-rate schedule as the non-parametric optimizer; gradients at the
embedding layer are backpropagated and applied with Adam.

Checkpoint layout: ``b"CNEN"`` + number of dims L (u32 LE) + L dims (u32 LE),
then for every layer the weight matrix (fan_in x fan_out, row-major) and the
bias vector as little-endian float64.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DivergenceError, FormatError
from .knn_graph import SkNNGraph
from .model import BatchGradient, LossSpec, Mode, batch_gradient
from .optimizer import BatchPlan, OptimizerConfig, iter_plan

NETWORK_MAGIC = b"CNEN"
HIDDEN = (100, 100, 100)
DEFAULT_LR = 1e-3


@dataclass
class Network:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # learned normalization in NCE mode
    Z: float | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ArgumentError("need one bias vector per weight matrix")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ArgumentError(f"layer {k}: weight {W.shape} and bias {b.shape} disagree")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise ArgumentError(f"layer {k}: input width {W.shape[0]} does not match "
                                    f"previous output {self.weights[k - 1].shape[1]}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "Network":
        return Network([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.Z)


def init_network(dims, seed: int = 0) -> Network:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ArgumentError(f"invalid layer dims {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(weights, biases)


def _check_rows(net: Network, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != net.dims[0]:
        raise ArgumentError(f"expected rows of width {net.dims[0]}, got shape {rows.shape}")
    return rows


def _forward_cached(net: Network, rows):
    acts = [rows]
    h = rows
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(net: Network, rows) -> np.ndarray:
    return _forward_cached(net, _check_rows(net, rows))[-1]


def backward(net: Network, rows, output_grads) -> list[np.ndarray]:
    """Gradients of ``sum(output_grads * forward(rows))``.

    Returned in ``net.params()`` order: ``[dW0, db0, dW1, db1, ...]``.
    """
    rows = _check_rows(net, rows)
    acts = _forward_cached(net, rows)
    delta = np.asarray(output_grads, dtype=np.float64)
    if delta.shape != acts[-1].shape:
        raise ArgumentError(f"output_grads shape {delta.shape} != output shape {acts[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = (delta @ net.weights[k].T) * (acts[k] > 0.0)
    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_update(params, grads, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam step on a list of arrays."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(net: Network, grads, state: AdamState, lr: float) -> None:
    adam_update(net.params(), grads, state, lr)


def batch_backprop(net: Network, X: np.ndarray, plan: BatchPlan,
                   Z: float | None = None) -> tuple[list[np.ndarray], BatchGradient]:
    """Forward the unique nodes of a batch, take per-pair gradients, backpropagate."""
    nodes, inverse = np.unique(
        np.concatenate([plan.heads, plan.tails, plan.negs.ravel()]), return_inverse=True)
    b = plan.heads.size
    heads = inverse[:b]
    tails = inverse[b:2 * b]
    negs = inverse[2 * b:].reshape(plan.negs.shape)
    rows = X[nodes]
    out = forward(net, rows)
    bg = batch_gradient(plan.spec, out, heads, tails, negs, Z)
    return backward(net, rows, bg.grad), bg


def train_parametric(graph: SkNNGraph, data, spec: LossSpec, cfg: OptimizerConfig,
                     seed: int | None = None, hidden=HIDDEN, d: int = 2,
                     net: Network | None = None, hook=None) -> Network:
    """Train an MLP ``[D, *hidden, d]`` with Adam; ``cfg.lr`` is Adam's base rate.

    ``seed`` initializes the weights (defaults to ``cfg.seed``); batches are
    drawn from ``cfg.seed`` exactly as in the non-parametric trainer.
    """
    X = np.asarray(getattr(data, "values", data), dtype=np.float64)
    if X.shape[0] != graph.n:
        raise ArgumentError(f"data has {X.shape[0]} rows, graph has {graph.n} nodes")
    if spec.n != graph.n:
        raise ArgumentError("spec.n does not match the graph")
    if net is None:
        net = init_network([X.shape[1], *hidden, d], cfg.seed if seed is None else seed)
    else:
        net = net.copy()
    state = AdamState.zeros_like(net.params())

    nce = spec.mode is Mode.NCE
    # log Z is a separate Adam parameter so its scale is free
    log_z = np.zeros(1)
    z_state = AdamState.zeros_like([log_z])

    epoch_loss, last = 0.0, None
    for plan in iter_plan(graph, spec, cfg):
        if last is not None and plan.epoch != last.epoch:
            if hook is not None:
                hook(last.epoch, epoch_loss)
            epoch_loss = 0.0
        if nce and plan.batch == 0 and plan.epoch == cfg.early_exag_epochs and plan.epoch > 0:
            log_z[:] = 0.0
            z_state = AdamState.zeros_like([log_z])
        Z = float(np.exp(log_z[0])) if nce else None
        grads, bg = batch_backprop(net, X, plan, Z)
        adam_step(net, grads, state, plan.lr)
        if nce:
            adam_update([log_z], [np.array([Z * bg.dZ])], z_state, plan.z_lr)
        if not all(np.isfinite(p).all() for p in net.params()) or not math.isfinite(bg.loss):
            raise DivergenceError(
                f"non-finite network weights at epoch {plan.epoch}, batch {plan.batch}",
                epoch=plan.epoch, batch=plan.batch)
        epoch_loss += bg.loss
        last = plan
    if last is not None and hook is not None:
        hook(last.epoch, epoch_loss)
    net.Z = float(np.exp(log_z[0])) if nce else None
    return net


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_network(net: Network, path) -> None:
    dims = net.dims
    with open(path, "wb") as fh:
        fh.write(NETWORK_MAGIC + struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        for W, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_network(path) -> Network:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != NETWORK_MAGIC:
        raise FormatError(f"{path}: missing CNEN header")
    (L,) = struct.unpack("<I", data[4:8])
    if L < 2 or len(data) < 8 + 4 * L:
        raise FormatError(f"{path}: truncated layer table")
    dims = struct.unpack(f"<{L}I", data[8:8 + 4 * L])
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    payload = np.frombuffer(data, dtype="<f8", offset=8 + 4 * L)
    if payload.size != expected or len(data) != 8 + 4 * L + 8 * expected:
        raise FormatError(f"{path}: expected {expected} parameters")
    weights, biases, pos = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(payload[pos:pos + a * b].reshape(a, b).copy())
        pos += a * b
        biases.append(payload[pos:pos + b].copy())
        pos += b
    return Network(weights, biases)
