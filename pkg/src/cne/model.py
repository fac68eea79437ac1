"""Similarity kernels, per-pair contrastive losses and their gradients.

All four loss modes share one representation: a kernel value ``q`` is handled
through its reciprocal ``r = 1/q`` (``1 + d2`` for the Cauchy kernel, ``d2``
for the inverse-square kernel).  Both reciprocals have ``dr/dd2 = 1``, which
keeps every derivative below in closed form and free of cancellation.

Distances enter as squared distances ``d2``.  A gradient *coefficient* ``c``
is defined by ``dloss/de_i = c * (e_i - e_j)`` and ``dloss/de_j = -c * (e_i - e_j)``,
so ``c = 2 * dloss/dd2``.

Normalization constants are in ordered-pair units: ``C = n(n-1)`` and a NEG
run with fixed ``zbar`` drives ``sum_{k != l} q(kl)`` towards ``zbar``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ArgumentError, DivergenceError


class Mode(str, Enum):
    NEG = "neg"
    NCE = "nce"
    INFONCE = "infonce"
    UMAP = "umap"


class Kernel(str, Enum):
    CAUCHY = "cauchy"
    INVERSE_SQUARE = "inverse_square"


@dataclass(frozen=True)
class LossSpec:
    """Loss configuration.

    Parameters
    ----------
    mode : Mode
        One of NEG, NCE, INFONCE, UMAP.
    n : int
        Number of embedded points; fixes ``C = n(n-1)``.
    zbar : float, optional
        Fixed normalization (NEG only), ordered-pair units.  Defaults to
        ``n(n-1)/m``, which makes the NEG offset ``zbar*m/C`` equal to one.
    m : int
        Noise samples per positive pair.
    eps : float
        Lower clip bound for every logarithm argument.
    kernel : Kernel
        Kernel used by NEG, NCE and INFONCE.  UMAP always uses its own
        ``-log q`` / ``-log(1-q)`` form with the Cauchy ``q``.
    """

    mode: Mode
    n: int
    zbar: float | None = None
    m: int = 5
    eps: float = 1e-10
    kernel: Kernel = Kernel.CAUCHY

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "kernel", Kernel(self.kernel))
        if self.n < 2:
            raise ArgumentError(f"need n >= 2 points, got {self.n}")
        if self.m < 1:
            raise ArgumentError(f"need m >= 1 noise samples, got {self.m}")
        if not 0.0 < self.eps < 1.0:
            raise ArgumentError(f"eps must lie in (0, 1), got {self.eps}")
        if self.zbar is None:
            object.__setattr__(self, "zbar", self.n * (self.n - 1) / self.m)
        if not (np.isfinite(self.zbar) and self.zbar > 0):
            raise ArgumentError(f"zbar must be positive and finite, got {self.zbar}")

    @property
    def n_ordered_pairs(self) -> int:
        return self.n * (self.n - 1)

    @property
    def neg_offset(self) -> float:
        """``zbar * m / C``, the constant added to ``q`` in NEG posteriors."""
        return self.zbar * self.m / self.n_ordered_pairs

    def replace(self, **changes) -> "LossSpec":
        return replace(self, **changes)


@dataclass(frozen=True)
class PairGradient:
    coeff: float
    dZ: float = 0.0


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def _check_d2(d2):
    d2 = np.asarray(d2, dtype=np.float64)
    if not np.all(np.isfinite(d2)) or np.any(d2 < 0):
        raise ArgumentError("squared distances must be finite and non-negative")
    return d2


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def cauchy(d2):
    """Cauchy kernel ``1 / (1 + d2)``."""
    d2 = _check_d2(d2)
    return _scalar_or_array(1.0 / (1.0 + d2))


def inverse_square(d2):
    """Inverse-square kernel ``1 / d2``; undefined at zero distance."""
    d2 = _check_d2(d2)
    if np.any(d2 == 0):
        raise DivergenceError("inverse-square kernel diverges at d2 = 0")
    return _scalar_or_array(1.0 / d2)


def _reciprocal_kernel(kernel: Kernel, d2):
    return d2 if kernel is Kernel.INVERSE_SQUARE else 1.0 + d2


# --------------------------------------------------------------------------
# vectorized per-pair terms
# --------------------------------------------------------------------------

def _offset(spec: LossSpec, Z):
    """Return ``c`` such that the data posterior is ``1 / (1 + c*r)``."""
    if spec.mode is Mode.NEG:
        return spec.neg_offset
    if spec.mode is Mode.NCE:
        if Z is None or not Z > 0:
            raise ArgumentError("NCE mode needs a positive normalization Z")
        return spec.m * Z
    raise ArgumentError(f"no posterior offset for mode {spec.mode.value}")


def attr_terms(spec: LossSpec, d2, Z=None):
    """Attractive loss, d loss/d d2 and d loss/dZ for arrays of ``d2``."""
    d2 = np.asarray(d2, dtype=np.float64)
    eps = spec.eps
    log_eps = -np.log(eps)
    if spec.mode is Mode.UMAP:
        # -log clip(q) with q = 1/(1+d2)
        loss = np.log1p(d2)
        clipped = loss > log_eps
        loss = np.where(clipped, log_eps, loss)
        dd2 = np.where(clipped, 0.0, 1.0 / (1.0 + d2))
        return loss, dd2, np.zeros_like(d2)
    c = _offset(spec, Z)
    r = _reciprocal_kernel(spec.kernel, d2)
    cr = c * r
    # -log clip(1/(1+cr))
    loss = np.log1p(cr)
    clipped = loss > log_eps
    loss = np.where(clipped, log_eps, loss)
    dd2 = np.where(clipped, 0.0, c / (1.0 + cr))
    if spec.mode is Mode.NCE:
        dZ = np.where(clipped, 0.0, spec.m * r / (1.0 + cr))
    else:
        dZ = np.zeros_like(d2)
    return loss, dd2, dZ


def rep_terms(spec: LossSpec, d2, Z=None):
    """Repulsive loss, d loss/d d2 and d loss/dZ for arrays of ``d2``."""
    d2 = np.asarray(d2, dtype=np.float64)
    eps = spec.eps
    log_eps = -np.log(eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.mode is Mode.UMAP:
            # -log clip(1 - q), 1 - q = d2/(1+d2)
            one_minus_q = d2 / (1.0 + d2)
            clipped = one_minus_q < eps
            loss = np.where(clipped, log_eps, -np.log(np.where(clipped, 1.0, one_minus_q)))
            dd2 = np.where(clipped, 0.0, -1.0 / np.where(clipped, 1.0, d2 * (1.0 + d2)))
            return loss, dd2, np.zeros_like(d2)
        c = _offset(spec, Z)
        r = _reciprocal_kernel(spec.kernel, d2)
        cr = c * r
        # 1 - x = cr/(1+cr);  -log(1-x) = log1p(1/cr)
        one_minus_x = cr / (1.0 + cr)
        clipped = one_minus_x < eps
        safe_cr = np.where(clipped, 1.0, cr)
        loss = np.where(clipped, log_eps, np.log1p(1.0 / safe_cr))
        dd2 = np.where(clipped, 0.0, -1.0 / (np.where(clipped, 1.0, r) * (1.0 + safe_cr)))
        if spec.mode is Mode.NCE:
            dZ = np.where(clipped, 0.0, -1.0 / (Z * (1.0 + safe_cr)))
        else:
            dZ = np.zeros_like(d2)
    return loss, dd2, dZ


def infonce_terms(spec: LossSpec, d2_pos, d2_neg):
    """InfoNCE loss per positive pair and derivatives w.r.t. every ``d2``.

    ``d2_pos`` has shape ``(b,)`` and ``d2_neg`` shape ``(b, m)``.
    """
    d2_pos = np.asarray(d2_pos, dtype=np.float64)
    d2_neg = np.asarray(d2_neg, dtype=np.float64)
    q_pos = 1.0 / _reciprocal_kernel(spec.kernel, d2_pos)
    q_neg = 1.0 / _reciprocal_kernel(spec.kernel, d2_neg)
    s = q_neg.sum(axis=-1)
    total = q_pos + s
    x = q_pos / total
    clipped = x < spec.eps
    loss = np.where(clipped, -np.log(spec.eps), np.log(total) - np.log(q_pos))
    dpos = np.where(clipped, 0.0, s * q_pos / total)
    dneg = np.where(clipped[..., None], 0.0, -(q_neg**2) / total[..., None])
    return loss, dpos, dneg


# --------------------------------------------------------------------------
# public per-pair API
# --------------------------------------------------------------------------

def _require_pairwise_mode(spec: LossSpec):
    if spec.mode is Mode.INFONCE:
        raise ArgumentError("InfoNCE couples a positive pair with its negatives; use infonce_loss")


def attr_loss(spec: LossSpec, d2, Z=None):
    _require_pairwise_mode(spec)
    return _scalar_or_array(attr_terms(spec, _check_d2(d2), Z)[0])


def rep_loss(spec: LossSpec, d2, Z=None):
    _require_pairwise_mode(spec)
    return _scalar_or_array(rep_terms(spec, _check_d2(d2), Z)[0])


def infonce_loss(spec: LossSpec, d2_pos, d2_negs) -> float:
    d2_negs = np.atleast_1d(_check_d2(d2_negs))
    if d2_negs.size == 0:
        raise ArgumentError("InfoNCE needs at least one negative sample")
    loss, _, _ = infonce_terms(spec, _check_d2(d2_pos), d2_negs)
    return float(loss)


def pair_grad(spec: LossSpec, term: str, e_i, e_j, Z=None) -> PairGradient:
    """Gradient coefficient of one attractive or repulsive pair term."""
    _require_pairwise_mode(spec)
    diff = np.asarray(e_i, dtype=np.float64) - np.asarray(e_j, dtype=np.float64)
    d2 = float(diff @ diff)
    if term == "attr":
        _, dd2, dz = attr_terms(spec, d2, Z)
    elif term == "rep":
        _, dd2, dz = rep_terms(spec, d2, Z)
    else:
        raise ArgumentError(f"term must be 'attr' or 'rep', got {term!r}")
    return PairGradient(coeff=2.0 * float(dd2), dZ=float(dz))


def infonce_grad(spec: LossSpec, e_i, e_pos, e_negs):
    """Gradient coefficients of one InfoNCE tuple.

    Returns the positive-pair :class:`PairGradient` and a list with one per
    negative, each in the ``c * (e_i - e_j)`` convention.
    """
    e_i = np.asarray(e_i, dtype=np.float64)
    d2_pos = np.sum((e_i - np.asarray(e_pos, dtype=np.float64)) ** 2)
    d2_neg = np.sum((e_i[None, :] - np.atleast_2d(e_negs)) ** 2, axis=1)
    _, dpos, dneg = infonce_terms(spec, d2_pos, d2_neg)
    return PairGradient(2.0 * float(dpos)), [PairGradient(2.0 * float(v)) for v in dneg]


# --------------------------------------------------------------------------
# batched gradient, shared by the non-parametric and parametric trainers
# --------------------------------------------------------------------------

@dataclass
class BatchGradient:
    grad: np.ndarray  # same shape as the coordinates passed in
    loss: float
    dZ: float
    n_terms: int


def batch_gradient(spec: LossSpec, coords, heads, tails, negs, Z=None) -> BatchGradient:
    """Loss and gradient of one batch of positive edges plus their negatives.

    ``heads``/``tails`` index rows of ``coords`` (shape ``(b,)``), ``negs``
    holds the sampled negative tails (shape ``(b, m)``).  Each pair feeds its
    gradient into both endpoints; contributions are reduced in a fixed order.
    """
    n_rows, dim = coords.shape
    b, m = negs.shape
    e_h = coords[heads]
    diff_pos = e_h - coords[tails]
    diff_neg = e_h[:, None, :] - coords[negs]
    d2_pos = np.einsum("ij,ij->i", diff_pos, diff_pos)
    d2_neg = np.einsum("ijk,ijk->ij", diff_neg, diff_neg)

    dZ = 0.0
    if spec.mode is Mode.INFONCE:
        loss_vec, dpos, dneg = infonce_terms(spec, d2_pos, d2_neg)
        loss = float(loss_vec.sum())
    else:
        la, dpos, za = attr_terms(spec, d2_pos, Z)
        lr_, dneg, zr = rep_terms(spec, d2_neg, Z)
        loss = float(la.sum() + lr_.sum())
        if spec.mode is Mode.NCE:
            dZ = float(za.sum() + zr.sum())

    f_pos = (2.0 * dpos)[:, None] * diff_pos
    f_neg = ((2.0 * dneg)[..., None] * diff_neg).reshape(b * m, dim)
    idx = np.concatenate([heads, tails, np.repeat(heads, m), negs.ravel()])
    force = np.concatenate([f_pos, -f_pos, f_neg, -f_neg])
    grad = np.empty_like(coords)
    for k in range(dim):
        grad[:, k] = np.bincount(idx, weights=force[:, k], minlength=n_rows)
    return BatchGradient(grad=grad, loss=loss, dZ=dZ, n_terms=b * (m + 1))


# --------------------------------------------------------------------------
# partition function
# --------------------------------------------------------------------------

PARTITION_BLOCK = 512


def partition_function(coords, block: int = PARTITION_BLOCK) -> float:
    """``sum_{k != l} 1/(1 + ||e_k - e_l||^2)`` over all ordered pairs.

    Rows are processed in fixed-size blocks and block sums are reduced in
    block order, so the result does not depend on threading.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 2:
        raise ArgumentError("partition function needs at least two points")
    partial = np.empty((n + block - 1) // block)
    for bi, start in enumerate(range(0, n, block)):
        rows = coords[start:start + block]
        d2 = np.sum((rows[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
        k = 1.0 / (1.0 + d2)
        k[np.arange(rows.shape[0]), np.arange(start, start + rows.shape[0])] = 0.0
        partial[bi] = k.sum()
    return float(partial.sum())
