import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cne.errors import ArgumentError, DivergenceError
from cne.model import (
    Kernel, LossSpec, Mode, attr_loss, batch_gradient, cauchy, infonce_grad, infonce_loss,
    inverse_square, pair_grad, partition_function, rep_loss,
)

from conftest import central_difference

EPS = 1e-10


# Reference losses written directly from the per-mode definitions, independent
# of the package's reciprocal-kernel formulation.

def clip(x):
    return min(max(x, EPS), 1.0)


def ref_attr(mode, d2, c=1.0, Z=1.0, m=5, kernel="cauchy"):
    q = 1.0 / (1.0 + d2) if kernel == "cauchy" else 1.0 / d2
    if mode == "neg":
        return -math.log(clip(q / (q + c)))
    if mode == "nce":
        return -math.log(clip((q / Z) / (q / Z + m)))
    return -math.log(clip(q))


def ref_rep(mode, d2, c=1.0, Z=1.0, m=5, kernel="cauchy"):
    q = 1.0 / (1.0 + d2) if kernel == "cauchy" else 1.0 / d2
    if mode == "neg":
        return -math.log(clip(1.0 - q / (q + c)))
    if mode == "nce":
        return -math.log(clip(1.0 - (q / Z) / (q / Z + m)))
    return -math.log(clip(1.0 - q))


def neg_spec(n=10, m=5, offset=1.0, kernel="cauchy"):
    return LossSpec(Mode.NEG, n=n, zbar=offset * n * (n - 1) / m, m=m, kernel=kernel)


# ---------------------------------------------------------------- kernels

def test_cauchy_values():
    assert cauchy(0.0) == 1.0
    assert cauchy(1.0) == 0.5
    assert cauchy(3.0) == 0.25


@pytest.mark.parametrize("bad", [-1.0, float("nan"), float("inf")])
def test_cauchy_rejects(bad):
    with pytest.raises(ArgumentError):
        cauchy(bad)


def test_inverse_square():
    assert inverse_square(1.0) == 1.0
    assert inverse_square(4.0) == 0.25
    q = inverse_square(0.7)
    assert abs(q / (q + 1) - cauchy(0.7)) < 1e-15
    with pytest.raises(DivergenceError):
        inverse_square(0.0)


# ---------------------------------------------------------------- losses

def test_spec_defaults():
    spec = LossSpec(Mode.NEG, n=100)
    assert spec.zbar == 100 * 99 / 5
    assert spec.neg_offset == pytest.approx(1.0)
    with pytest.raises(ArgumentError):
        LossSpec(Mode.NEG, n=10, zbar=-1)
    with pytest.raises(ArgumentError):
        LossSpec(Mode.NEG, n=10, m=0)
    with pytest.raises(ArgumentError):
        LossSpec(Mode.NEG, n=10, eps=1.0)


def test_attr_examples():
    assert attr_loss(LossSpec(Mode.UMAP, n=10), 0.0) == 0.0
    assert attr_loss(neg_spec(), 0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert attr_loss(LossSpec(Mode.NCE, n=10, m=1), 0.0, Z=1.0) == pytest.approx(math.log(2))


def test_rep_examples():
    assert rep_loss(neg_spec(), 0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert rep_loss(LossSpec(Mode.UMAP, n=10), 0.0) == pytest.approx(-math.log(1e-10))
    assert rep_loss(neg_spec(), 1e8) < 1e-7


def test_neg_matches_attr_rep_forms():
    # attraction log(2 + d2), repulsion log((2 + d2)/(1 + d2)) at offset one
    spec = neg_spec()
    for d2 in [0.0, 0.3, 2.0, 50.0]:
        assert attr_loss(spec, d2) == pytest.approx(math.log(2 + d2), rel=1e-14)
        assert rep_loss(spec, d2) == pytest.approx(math.log((2 + d2) / (1 + d2)), rel=1e-13)


def test_nce_requires_z():
    with pytest.raises(ArgumentError):
        attr_loss(LossSpec(Mode.NCE, n=10), 1.0)


def test_infonce_examples():
    spec = LossSpec(Mode.INFONCE, n=10, m=1)
    assert infonce_loss(spec, 0.7, [0.7]) == pytest.approx(math.log(2))
    assert infonce_loss(spec, 0.0, [1e12]) < 1e-10
    # q+ = 0.5, q- = 0.25 twice
    assert infonce_loss(LossSpec(Mode.INFONCE, n=10, m=2), 1.0, [3.0, 3.0]) == pytest.approx(math.log(2))
    with pytest.raises(ArgumentError):
        infonce_loss(spec, 1.0, [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=6), st.floats(0, 100), st.randoms())
def test_infonce_permutation_invariant(negs, pos, rnd):
    spec = LossSpec(Mode.INFONCE, n=10, m=len(negs))
    shuffled = list(negs)
    rnd.shuffle(shuffled)
    assert infonce_loss(spec, pos, negs) == pytest.approx(infonce_loss(spec, pos, shuffled), rel=1e-12)


MODES = [("neg", Mode.NEG), ("nce", Mode.NCE), ("umap", Mode.UMAP)]


@settings(max_examples=200, deadline=None)
@given(mode=st.sampled_from(MODES), d2=st.floats(1e-4, 1e4), Z=st.floats(1e-3, 10),
       offset=st.floats(1e-3, 1e3), kernel=st.sampled_from(["cauchy", "inverse_square"]))
def test_losses_match_reference(mode, d2, Z, offset, kernel):
    name, enum = mode
    if enum is Mode.NEG:
        spec = neg_spec(offset=offset, kernel=kernel)
    else:
        spec = LossSpec(enum, n=10, kernel=kernel)
    kw = dict(c=offset, Z=Z, m=5, kernel=kernel if enum is not Mode.UMAP else "cauchy")
    assert attr_loss(spec, d2, Z) == pytest.approx(ref_attr(name, d2, **kw), rel=1e-9, abs=1e-12)
    assert rep_loss(spec, d2, Z) == pytest.approx(ref_rep(name, d2, **kw), rel=1e-6, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(mode=st.sampled_from(MODES), a=st.floats(0, 1e3), b=st.floats(0, 1e3), Z=st.floats(1e-3, 10))
def test_monotone_in_distance(mode, a, b, Z):
    spec = neg_spec() if mode[1] is Mode.NEG else LossSpec(mode[1], n=10)
    lo, hi = min(a, b), max(a, b)
    assert attr_loss(spec, lo, Z) <= attr_loss(spec, hi, Z)
    assert rep_loss(spec, lo, Z) >= rep_loss(spec, hi, Z)


def test_umap_equals_neg_with_inverse_square():
    d2 = np.logspace(-6, 6, 2000)
    umap = LossSpec(Mode.UMAP, n=10)
    neg = neg_spec(kernel="inverse_square")
    assert np.max(np.abs(attr_loss(umap, d2) - attr_loss(neg, d2))) < 1e-12
    assert np.max(np.abs(rep_loss(umap, d2) - rep_loss(neg, d2))) < 1e-12


# ---------------------------------------------------------------- gradients

def test_coincident_points_zero_vector():
    e = np.array([0.3, -1.0])
    for spec in [neg_spec(), LossSpec(Mode.UMAP, n=10), LossSpec(Mode.NCE, n=10)]:
        g = pair_grad(spec, "attr", e, e, Z=1.0)
        assert np.all(g.coeff * (e - e) == 0)


def test_sign_convention():
    e_i, e_j = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    assert pair_grad(neg_spec(), "attr", e_i, e_j).coeff >= 0
    assert pair_grad(neg_spec(), "rep", e_i, e_j).coeff <= 0


def test_neg_attr_finite_difference_example():
    spec = neg_spec()
    e_i, e_j = np.array([0.0, 0.0]), np.array([1.0, 0.0])
    g = pair_grad(spec, "attr", e_i, e_j)
    fd = central_difference(lambda x: ref_attr("neg", float(np.sum((x - e_j) ** 2))), e_i)
    analytic = g.coeff * (e_i - e_j)
    assert np.linalg.norm(analytic - fd) / np.linalg.norm(analytic) < 1e-5


def test_nce_dz_finite_difference():
    spec = LossSpec(Mode.NCE, n=10, m=1)
    g = pair_grad(spec, "attr", np.zeros(2), np.zeros(2), Z=1.0)
    h = 1e-6
    fd = (ref_attr("nce", 0.0, Z=1 + h, m=1) - ref_attr("nce", 0.0, Z=1 - h, m=1)) / (2 * h)
    assert g.dZ == pytest.approx(fd, rel=1e-6)
    g = pair_grad(spec, "rep", np.zeros(2), np.array([0.5, 0.5]), Z=2.0)
    fd = (ref_rep("nce", 0.5, Z=2 + h, m=1) - ref_rep("nce", 0.5, Z=2 - h, m=1)) / (2 * h)
    assert g.dZ == pytest.approx(fd, rel=1e-6)


def test_gradient_zero_under_clip():
    spec = LossSpec(Mode.UMAP, n=10)
    e = np.array([1.0, 1.0])
    assert pair_grad(spec, "rep", e, e).coeff == 0.0
    far = pair_grad(spec, "attr", np.zeros(2), np.array([1e6, 0.0]))
    assert far.coeff == 0.0


@settings(max_examples=150, deadline=None)
@given(mode=st.sampled_from(MODES), term=st.sampled_from(["attr", "rep"]),
       seed=st.integers(0, 2**32 - 1), Z=st.floats(1e-2, 10), offset=st.floats(1e-2, 1e2))
def test_pair_grad_finite_difference(mode, term, seed, Z, offset):
    name, enum = mode
    rng = np.random.default_rng(seed)
    e_i, e_j = rng.normal(scale=2.0, size=(2, 2))
    spec = neg_spec(offset=offset) if enum is Mode.NEG else LossSpec(enum, n=10)
    ref = ref_attr if term == "attr" else ref_rep
    f = lambda x: ref(name, float(np.sum((x - e_j) ** 2)), c=offset, Z=Z)
    analytic = pair_grad(spec, term, e_i, e_j, Z).coeff * (e_i - e_j)
    fd = central_difference(f, e_i)
    assert np.linalg.norm(analytic - fd) <= 1e-5 * np.linalg.norm(analytic) + 1e-9


def test_infonce_grad_finite_difference():
    rng = np.random.default_rng(0)
    spec = LossSpec(Mode.INFONCE, n=10, m=3)
    for _ in range(20):
        e_i, e_p = rng.normal(size=(2, 2))
        e_n = rng.normal(size=(3, 2))
        pos, negs = infonce_grad(spec, e_i, e_p, e_n)

        def f(x):
            qp = 1 / (1 + np.sum((x - e_p) ** 2))
            qn = 1 / (1 + np.sum((x - e_n) ** 2, axis=1))
            return -math.log(qp / (qp + qn.sum()))

        analytic = pos.coeff * (e_i - e_p) + sum(g.coeff * (e_i - e_n[k]) for k, g in enumerate(negs))
        fd = central_difference(f, e_i)
        assert np.linalg.norm(analytic - fd) <= 1e-5 * np.linalg.norm(analytic) + 1e-9


@pytest.mark.parametrize("mode", [Mode.NEG, Mode.NCE, Mode.UMAP, Mode.INFONCE])
def test_batch_gradient_matches_summed_pairs(mode):
    rng = np.random.default_rng(1)
    n, b, m = 8, 5, 3
    coords = rng.normal(size=(n, 2))
    heads = rng.integers(0, n, b)
    tails = (heads + 1 + rng.integers(0, n - 1, b)) % n
    negs = rng.integers(0, n, (b, m))
    spec = LossSpec(mode, n=n, m=m)
    Z = 0.7
    bg = batch_gradient(spec, coords, heads, tails, negs, Z)

    expected = np.zeros_like(coords)
    dZ = 0.0
    for k in range(b):
        i, j = heads[k], tails[k]
        if mode is Mode.INFONCE:
            pos, ng = infonce_grad(spec, coords[i], coords[j], coords[negs[k]])
            pairs = [(j, pos)] + list(zip(negs[k], ng))
        else:
            pos = pair_grad(spec, "attr", coords[i], coords[j], Z)
            pairs = [(j, pos)] + [(t, pair_grad(spec, "rep", coords[i], coords[t], Z)) for t in negs[k]]
        for t, g in pairs:
            force = g.coeff * (coords[i] - coords[t])
            expected[i] += force
            expected[t] -= force
            dZ += g.dZ
    np.testing.assert_allclose(bg.grad, expected, atol=1e-12)
    assert bg.dZ == pytest.approx(dZ, abs=1e-12)


def test_batch_gradient_is_loss_gradient():
    rng = np.random.default_rng(2)
    n = 6
    coords = rng.normal(size=(n, 2))
    heads, tails = np.array([0, 1, 2, 3]), np.array([1, 2, 3, 4])
    negs = np.array([[5, 2], [0, 4], [5, 5], [1, 0]])
    spec = LossSpec(Mode.NEG, n=n, m=2)
    fd = central_difference(lambda x: batch_gradient(spec, x, heads, tails, negs).loss, coords)
    np.testing.assert_allclose(batch_gradient(spec, coords, heads, tails, negs).grad, fd, atol=1e-8)


# ---------------------------------------------------------------- partition function

def test_partition_examples():
    assert partition_function(np.array([[0.0, 0.0], [1.0, 0.0]])) == pytest.approx(1.0)
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    assert partition_function(tri) == pytest.approx(3.0, rel=1e-14)
    assert partition_function(np.zeros((5, 2))) == 20.0


def test_partition_blocking_is_exact():
    X = np.random.default_rng(3).normal(size=(37, 2))
    d2 = ((X[:, None] - X[None]) ** 2).sum(-1)
    ref = (1 / (1 + d2)).sum() - 37
    assert partition_function(X, block=5) == pytest.approx(ref, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), angle=st.floats(0, 2 * math.pi), shift=st.floats(-100, 100))
def test_partition_rigid_invariance(seed, angle, shift):
    X = np.random.default_rng(seed).normal(size=(20, 2))
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    Y = X @ R.T + shift
    assert partition_function(Y) == pytest.approx(partition_function(X), rel=1e-9)
