"""Finite-difference checks for every autodiff primitive."""

import numpy as np
import pytest

from patchcast import autodiff as ad
from patchcast.autodiff import Tensor
from patchcast.errors import NumericError


def finite_diff(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued fn at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = fn(x)
        flat[i] = orig - h
        lm = fn(x)
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * h)
    return g


def check_op(build, x0: np.ndarray, rtol: float = 1e-6):
    """build(tensor) -> scalar Tensor; compares backward() against FD."""
    t = Tensor(x0.copy(), requires_grad=True)
    out = build(t)
    out.backward()
    fd = finite_diff(lambda x: build(Tensor(x)).item(), x0.copy())
    np.testing.assert_allclose(t.grad, fd, rtol=rtol, atol=1e-7)


RNG = np.random.default_rng(42)


def test_add_mul_broadcast():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4,))
    ta = Tensor(a.copy(), requires_grad=True)
    tb = Tensor(b.copy(), requires_grad=True)
    ((ta + tb) * tb).sum().backward()
    fd_a = finite_diff(lambda x: float(((x + b) * b).sum()), a.copy())
    fd_b = finite_diff(lambda x: float(((a + x) * x).sum()), b.copy())
    np.testing.assert_allclose(ta.grad, fd_a, rtol=1e-6)
    np.testing.assert_allclose(tb.grad, fd_b, rtol=1e-6)


def test_matmul():
    a = RNG.normal(size=(3, 5))
    b = RNG.normal(size=(5, 2))
    ta = Tensor(a.copy(), requires_grad=True)
    tb = Tensor(b.copy(), requires_grad=True)
    ((ta @ tb) ** 2).sum().backward()
    fd_a = finite_diff(lambda x: float(((x @ b) ** 2).sum()), a.copy())
    np.testing.assert_allclose(ta.grad, fd_a, rtol=1e-5)
    fd_b = finite_diff(lambda x: float(((a @ x) ** 2).sum()), b.copy())
    np.testing.assert_allclose(tb.grad, fd_b, rtol=1e-5)


def test_batched_matmul():
    a = RNG.normal(size=(2, 3, 4))
    b = RNG.normal(size=(2, 4, 3))
    check_op(lambda t: (t @ Tensor(b)).sum(), a)


def test_elementwise_chain():
    x = RNG.normal(size=(4, 3)) + 3.0  # keep log/sqrt domains positive
    check_op(lambda t: (t.log() + t.sqrt() * t.exp()).sum(), x, rtol=1e-5)


def test_relu():
    x = RNG.normal(size=(5, 5)) + 0.1
    check_op(lambda t: (t.relu() * 2.0).sum(), x)


def test_division_and_pow():
    x = RNG.normal(size=(6,)) + 2.5
    check_op(lambda t: ((1.0 / t) + t**3).sum(), x, rtol=1e-5)


def test_reductions_and_reshape():
    x = RNG.normal(size=(4, 6))
    check_op(lambda t: t.mean(axis=1).sum() + t.reshape(24).sum() + t.sum(axis=0, keepdims=True).sum(), x)


def test_transpose_take_concat():
    x = RNG.normal(size=(5, 3))

    def build(t):
        moved = t.transpose(1, 0)
        picked = t.take([0, 2, 2, 4], axis=0)  # repeated index: grads must accumulate
        return moved.sum() + (picked * picked).sum() + ad.concat([t, picked], axis=0).sum()

    check_op(build, x)


def test_softmax_grad_and_rows():
    x = RNG.normal(size=(4, 7))
    y = ad.softmax(Tensor(x))
    np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(4), atol=1e-12)
    check_op(lambda t: (ad.softmax(t, axis=-1) * Tensor(RNG.normal(size=(4, 7)) * 0 + np.arange(7.0))).sum(), x, rtol=1e-5)


def test_softmax_shift_invariance():
    x = RNG.normal(size=(3, 5))
    np.testing.assert_allclose(
        ad.softmax(Tensor(x)).data, ad.softmax(Tensor(x + 123.456)).data, atol=1e-12
    )


def test_layer_norm_grad():
    x = RNG.normal(size=(3, 6))
    gain = RNG.normal(size=(6,)) + 1.0
    bias = RNG.normal(size=(6,))

    tg = Tensor(gain.copy(), requires_grad=True)
    tb = Tensor(bias.copy(), requires_grad=True)
    tx = Tensor(x.copy(), requires_grad=True)
    (ad.layer_norm(tx, tg, tb) ** 2).sum().backward()

    fd_x = finite_diff(lambda v: float((ad.layer_norm(Tensor(v), Tensor(gain), Tensor(bias)).data ** 2).sum()), x.copy())
    fd_g = finite_diff(lambda v: float((ad.layer_norm(Tensor(x), Tensor(v), Tensor(bias)).data ** 2).sum()), gain.copy())
    fd_b = finite_diff(lambda v: float((ad.layer_norm(Tensor(x), Tensor(gain), Tensor(v)).data ** 2).sum()), bias.copy())
    np.testing.assert_allclose(tx.grad, fd_x, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(tg.grad, fd_g, rtol=1e-5)
    np.testing.assert_allclose(tb.grad, fd_b, rtol=1e-5)


def test_logsumexp_matches_numpy():
    x = RNG.normal(size=(4, 9)) * 5
    got = ad.logsumexp(Tensor(x), axis=1).data
    ref = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) + x.max(axis=1)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    check_op(lambda t: ad.logsumexp(t, axis=1).sum(), x.copy(), rtol=1e-5)


def test_diamond_graph_accumulates():
    # y = x*x + x used twice: dy/dx = 2x + 1
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x
    y.backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_check_finite():
    with pytest.raises(NumericError):
        ad.check_finite(np.array([1.0, np.inf]), "test vector")
