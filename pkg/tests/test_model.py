import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixfl.losses import QuadraticDevice
from mixfl.model import (
    L1Regularizer,
    MixtureProblem,
    StackedModel,
    block_average,
    grad_F,
    grad_psi,
    objective_value,
    psi,
    psi_hessian_dense,
    smooth_value,
)

from conftest import logistic_problem

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
models = st.integers(1, 6).flatmap(lambda n: st.integers(1, 4).flatmap(
    lambda d: arrays(np.float64, (n, d), elements=finite)))


def test_stacked_model_rejects_bad_input():
    with pytest.raises(ValueError):
        StackedModel([[1.0, np.nan]])
    with pytest.raises(ValueError):
        StackedModel(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        StackedModel(np.zeros((0, 3)))
    x = StackedModel.replicate([1.0, 2.0], 3)
    assert (x.n, x.d) == (3, 2)
    assert np.asarray(x).shape == (3, 2)


def test_block_average_examples(rng):
    assert block_average(np.array([[0.0], [2.0]])) == pytest.approx([1.0])
    v = np.array([1.5, -2.0])
    assert np.array_equal(block_average(np.tile(v, (4, 1))), v)
    x = rng.standard_normal((3, 2))
    rev = (x[2] + x[1] + x[0]) / 3
    assert np.max(np.abs(block_average(x) - rev)) <= 1e-15


def test_psi_examples(rng):
    assert psi(np.ones((4, 3))) == 0.0
    assert psi(np.array([[0.0], [2.0]])) == pytest.approx(0.5)
    x = rng.standard_normal((4, 3))
    brute = 0.0
    for i in range(4):
        xb = sum(x[j] for j in range(4)) / 4
        brute += sum((x[i, k] - xb[k]) ** 2 for k in range(3))
    brute /= 8
    assert abs(psi(x) - brute) / brute <= 1e-14


def test_grad_psi_examples(rng):
    assert np.all(np.asarray(grad_psi(np.ones((3, 2)))) == 0)
    assert np.allclose(np.asarray(grad_psi(np.array([[0.0], [2.0]]))), [[-0.5], [0.5]])
    x = rng.standard_normal((4, 3))
    g = np.asarray(grad_psi(x))
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd[idx] = (psi(x + e) - psi(x - e)) / (2 * h)
    assert np.linalg.norm(fd - g) / np.linalg.norm(g) <= 1e-6


def test_psi_hessian():
    H = psi_hessian_dense(2, 1)
    assert np.allclose(H, 0.5 * np.array([[0.5, -0.5], [-0.5, 0.5]]), atol=1e-15)
    with pytest.raises(ValueError):
        psi_hessian_dense(101, 100)
    rng = np.random.default_rng(0)
    for n in (1, 2, 5, 20):
        for d in (1, 3, 5):
            H = psi_hessian_dense(n, d)
            ev = np.linalg.eigvalsh(H)
            assert abs(ev.max() - (1.0 / n if n > 1 else 0.0)) <= 1e-10
            assert np.sum(np.abs(ev - 1.0 / n) < 1e-10) == (n * d - d if n > 1 else 0)
            assert np.sum(np.abs(ev) < 1e-10) == d
            x = rng.standard_normal((n, d))
            hx = (H @ x.ravel()).reshape(n, d)
            g = np.asarray(grad_psi(x))
            if n > 1:
                assert np.linalg.norm(hx - g) <= 1e-12 * np.linalg.norm(g)


@settings(max_examples=100, deadline=None)
@given(models)
def test_psi_identity_and_zero_sum(x):
    g = np.asarray(grad_psi(x))
    n = x.shape[0]
    val = psi(x)
    assert abs(val - n / 2 * np.sum(g * g)) <= 1e-12 * max(val, 1e-300) + 1e-300
    scale = max(1.0, np.abs(x).max())
    assert np.all(np.abs(g.sum(axis=0)) <= 1e-13 * scale)


@settings(max_examples=50, deadline=None)
@given(models, arrays(np.float64, 4, elements=finite))
def test_psi_shift_invariance(x, v):
    shifted = x + v[: x.shape[1]]
    base = psi(x)
    assert abs(psi(shifted) - base) <= 1e-12 * max(base, 1.0) * max(1.0, np.abs(v).max()) ** 2


def test_objective_examples(rng):
    P = logistic_problem(rng, n=3, m=4, d=3, lam=0.0)
    x = rng.standard_normal((3, 3))
    assert objective_value(P, x) == pytest.approx(np.mean([dev.value(xi) for dev, xi in zip(P.devices, x)]))
    C = rng.standard_normal((4, 2))
    Q = MixtureProblem([QuadraticDevice(c) for c in C], 2.5)
    assert objective_value(Q, C) == pytest.approx(2.5 * psi(C), rel=1e-14)
    P = logistic_problem(rng, n=3, m=5, d=3, lam=0.4)
    x = rng.standard_normal((3, 3))
    total = 0.0
    for i in reversed(range(3)):
        dev = P.devices[i]
        for j in reversed(range(dev.m)):
            total += dev.component_value(j, x[i]) / dev.m
    oracle = total / 3 + 0.4 * psi(x)
    assert abs(objective_value(P, x) - oracle) <= 1e-13 * abs(oracle)


def test_objective_includes_regularizer(rng):
    P = logistic_problem(rng, n=2, m=3, d=2)
    x = rng.standard_normal((2, 2))
    R = MixtureProblem(P.devices, P.lam, [L1Regularizer(0.3), L1Regularizer(0.0)])
    assert objective_value(R, x) == pytest.approx(smooth_value(P, x) + 0.3 * np.abs(x[0]).sum())
    assert R.has_regularizer and not P.has_regularizer


def test_grad_F(rng):
    P = logistic_problem(rng, n=3, m=4, d=3, lam=0.0)
    x = rng.standard_normal((3, 3))
    assert np.allclose(np.asarray(grad_F(P, x)), np.stack([d.grad(xi) for d, xi in zip(P.devices, x)]) / 3)
    P = P.with_lambda(0.8)
    g = np.asarray(grad_F(P, x))
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd[idx] = (smooth_value(P, x + e) - smooth_value(P, x - e)) / (2 * h)
    assert np.linalg.norm(fd - g) / np.linalg.norm(g) <= 1e-5


def test_dimension_mismatch(rng):
    P = logistic_problem(rng, n=2, m=2, d=3)
    with pytest.raises(ValueError):
        objective_value(P, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        grad_F(P, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        MixtureProblem(P.devices, -1.0)
