import numpy as np
import pytest

from lifseg import autodiff as ad
from lifseg.errors import NotScalarLoss, ShapeMismatch

SEEDS = range(20)


def test_relu_and_softmax_values():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(ad.softmax_lastdim(np.full((2, 5), 3.0)).data, 0.2)


def test_identity_centre_kernel_keeps_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 4, 3))
    kernel = np.zeros((3, 3, 3, 3))
    kernel[1, 1] = np.eye(3)
    np.testing.assert_allclose(ad.conv2d_3x3(x, kernel).data, x, atol=1e-15)


def test_conv2d_3x3_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4, 5, 2))
    kernel = rng.normal(size=(3, 3, 2, 3))
    out = ad.conv2d_3x3(x, kernel).data
    expected = np.zeros((1, 4, 5, 3))
    for y in range(4):
        for xx in range(5):
            for dy in range(3):
                for dx in range(3):
                    yy, xs = y + dy - 1, xx + dx - 1
                    if 0 <= yy < 4 and 0 <= xs < 5:
                        expected[0, y, xx] += x[0, yy, xs] @ kernel[dy, dx]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gather_rows_missing_index_is_zero():
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ad.gather_rows(x, np.array([2, -1, 0])).data, [[4.0, 5.0], [0.0, 0.0], [0.0, 1.0]])


def test_scatter_rows_mean_values():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [10.0, 10.0]])
    out = ad.scatter_rows_mean(x, np.array([1, 1, -1]), 3).data
    np.testing.assert_array_equal(out, [[0.0, 0.0], [2.0, 3.0], [0.0, 0.0]])


def test_no_tape_records_nothing():
    w = ad.parameter(np.ones((2, 2)))
    out = ad.matmul(np.ones((1, 2)), w)
    assert not out.requires_grad
    with ad.Tape() as tape:
        ad.matmul(np.ones((1, 2)), np.ones((2, 2)))
    assert len(tape) == 0


def test_backward_requires_scalar():
    w = ad.parameter(np.ones((2, 2)))
    with ad.Tape() as tape:
        out = ad.relu(w)
    with pytest.raises(NotScalarLoss):
        ad.backward(tape, out)


def test_shape_checks():
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeMismatch):
        ad.reshape(np.ones(6), (4, 2))
    with pytest.raises(ShapeMismatch):
        ad.gather_rows(np.ones((2, 2)), np.array([2]))


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_three_layer_composition(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4))
    w1 = ad.parameter(rng.normal(size=(4, 5)))
    b1 = ad.parameter(rng.normal(size=5))
    w2 = ad.parameter(rng.normal(size=(5, 3)))
    w3 = ad.parameter(rng.normal(size=(3, 2)))

    def loss():
        h = ad.relu(ad.dense(x, w1, b1))
        h = ad.softmax_lastdim(ad.matmul(h, w2))
        return ad.mean_all(ad.mul_scalar(ad.matmul(h, w3), 1.5))

    assert ad.check_gradients(loss, [w1, b1, w2, w3]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_convolutions(seed):
    rng = np.random.default_rng(100 + seed)
    x = ad.parameter(rng.normal(size=(2, 4, 3, 2)))
    k3 = ad.parameter(rng.normal(size=(3, 3, 2, 3)))
    b3 = ad.parameter(rng.normal(size=3))
    k1 = ad.parameter(rng.normal(size=(3, 2)))
    b1 = ad.parameter(rng.normal(size=2))

    def weighted():
        y = ad.conv2d_1x1(ad.conv2d_3x3(x, k3, b3), k1, b1)
        flat = ad.reshape(y, (2 * 4 * 3, 2))
        return ad.mean_all(ad.matmul(flat, np.array([[1.0], [-0.5]])))

    assert ad.check_gradients(weighted, [x, k3, b3, k1, b1]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_gather_scatter_concat(seed):
    rng = np.random.default_rng(200 + seed)
    x = ad.parameter(rng.normal(size=(7, 3)))
    y = ad.parameter(rng.normal(size=(7, 2)))
    index = rng.integers(-1, 4, size=7)
    gather_index = rng.integers(-1, 7, size=9)
    mix = rng.normal(size=(5, 1))

    def loss():
        pooled = ad.gather_rows(ad.scatter_rows_mean(x, index, 4), np.clip(index, 0, None))
        both = ad.concat_lastdim([pooled, y])
        picked = ad.gather_rows(both, gather_index)
        return ad.mean_all(ad.matmul(picked, mix))

    assert ad.check_gradients(loss, [x, y]) < 1e-4


def test_gradient_accumulates_over_reuse():
    w = ad.parameter(np.array([[2.0]]))
    with ad.Tape() as tape:
        loss = ad.mean_all(ad.add(ad.matmul(w, w), ad.mul_scalar(w, 3.0)))
    grads = ad.backward(tape, loss)
    np.testing.assert_allclose(grads[w], [[2 * 2.0 + 3.0]])


def test_sgd_step_arithmetic():
    p = ad.parameter(np.array([1.0]))
    ad.sgd_step([p], {p: np.array([2.0])}, 0.5)
    np.testing.assert_array_equal(p.data, [0.0])
    ad.sgd_step({"p": p}, {p: np.array([2.0])}, 0.0)
    np.testing.assert_array_equal(p.data, [0.0])
    with pytest.raises(ShapeMismatch):
        ad.sgd_step([p], {p: np.zeros(2)}, 0.1)


def test_sgd_on_convex_quadratic_is_monotone():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 1))
    w = ad.parameter(np.zeros((3, 1)))
    losses = []
    for _ in range(100):
        with ad.Tape() as tape:
            residual = ad.add(ad.matmul(a, w), ad.DenseArray(-target))
            loss = _squared_mean(residual)
        losses.append(loss.item())
        ad.sgd_step([w], ad.backward(tape, loss), 0.01)
    assert all(b <= a_ + 1e-15 for a_, b in zip(losses, losses[1:]))


def _squared_mean(x):
    value = np.mean(x.data ** 2)
    return ad.make_node(np.asarray(value), (x,), lambda g: (float(g) * 2.0 * x.data / x.data.size,), "square_mean")


def test_backward_is_linear_over_a_sum_of_losses():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 4))
    w = ad.parameter(rng.normal(size=(4, 3)))
    b = ad.parameter(rng.normal(size=3))

    def first():
        return ad.mean_all(ad.relu(ad.dense(x, w, b)))

    mix = rng.normal(size=(3, 1))

    def second():
        return ad.mean_all(ad.matmul(ad.softmax_lastdim(ad.matmul(x, w)), mix))

    grads = []
    for build in (first, second, lambda: ad.add(ad.mul_scalar(first(), 2.0), ad.mul_scalar(second(), -0.5))):
        with ad.Tape() as tape:
            loss = build()
        grads.append(ad.backward(tape, loss))
    for p in (w, b):
        expected = 2.0 * grads[0].get(p, 0.0) - 0.5 * grads[1].get(p, 0.0)
        np.testing.assert_allclose(grads[2].get(p, 0.0), expected, atol=1e-12)
