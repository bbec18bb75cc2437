"""Tensor engine checks: hand-computed values plus the finite-difference oracle."""

import math

import numpy as np
import pytest

from conftest import finite_difference_gradients, max_relative_error
from fedgraphssl import autodiff as ad
from fedgraphssl.errors import DomainError, ShapeError


def test_matmul_identity_passthrough():
    m = ad.param([[1.0, 2.0], [3.0, 4.0]])
    eye = ad.constant(np.eye(2))
    out = ad.matmul(eye, m)
    assert np.array_equal(out.value, m.value)
    grads = ad.backward(ad.sum_all(out))
    assert np.array_equal(grads[m], np.ones((2, 2)))


def test_matmul_hand_computed():
    a = ad.param([[1.0, 2.0], [3.0, 4.0]])
    b = ad.param([[1.0], [1.0]])
    out = ad.matmul(a, b)
    assert np.array_equal(out.value, [[3.0], [7.0]])


def test_matmul_zero_annihilates():
    z = ad.constant(np.zeros((2, 2)))
    m = ad.param([[5.0, -1.0], [2.0, 0.5]])
    assert np.array_equal(ad.matmul(z, m).value, np.zeros((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(ad.param(np.ones((2, 3))), ad.param(np.ones((2, 3))))


def test_sigmoid_at_zero():
    x = ad.param([[0.0]])
    s = ad.sigmoid(x)
    assert s.item() == pytest.approx(0.5)
    grads = ad.backward(s)
    assert grads[x][0, 0] == pytest.approx(0.25)


def test_relu_negative():
    x = ad.param([[-3.0]])
    r = ad.relu(x)
    assert r.item() == 0.0
    grads = ad.backward(r)
    assert grads[x][0, 0] == 0.0


def test_exp_value_and_gradient():
    x = ad.param([[1.0]])
    e = ad.exp(x)
    assert e.item() == pytest.approx(math.e)
    grads = ad.backward(e)
    assert grads[x][0, 0] == pytest.approx(math.e)


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        ad.log(ad.param([[0.0]]))


def test_softmax_symmetry_and_stability():
    z = ad.param([[0.0, 0.0], [1000.0, 1000.0]])
    p = ad.softmax_rows(z)
    assert np.allclose(p.value, 0.5)


def test_softmax_hand_computed():
    p = ad.softmax_rows(ad.param([[1.0, 0.0]]))
    assert p.value[0, 0] == pytest.approx(0.7310585786, abs=1e-9)
    assert p.value[0, 1] == pytest.approx(0.2689414214, abs=1e-9)


def test_softmax_rows_sum_to_one_for_large_inputs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        z = rng.uniform(-1e4, 1e4, size=(5, 4))
        p = ad.softmax_rows(ad.param(z))
        assert np.max(np.abs(p.value.sum(axis=1) - 1.0)) < 1e-9


def test_backward_requires_scalar():
    x = ad.param(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.backward(x)


def test_diamond_graph_accumulates_additively():
    # loss = sum(x*x + x) so dloss/dx = 2x + 1 through two paths sharing x.
    x = ad.param([[3.0]])
    left = ad.mul(x, x)
    out = ad.add(left, x)
    grads = ad.backward(ad.sum_all(out))
    assert grads[x][0, 0] == pytest.approx(7.0)


def test_gather_rows_accumulates_duplicates():
    x = ad.param(np.arange(6.0).reshape(3, 2))
    g = ad.gather_rows(x, [0, 0, 2])
    grads = ad.backward(ad.sum_all(g))
    assert np.array_equal(grads[x], [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: ad.matmul(a, b),
        lambda a, b: ad.add(a, b),
        lambda a, b: ad.sub(a, b),
        lambda a, b: ad.mul(a, b),
        lambda a, b: ad.mul(ad.sigmoid(a), ad.relu(b)),
        lambda a, b: ad.exp(ad.scale(ad.add(a, b), 0.3)),
        lambda a, b: ad.log(ad.clamp(ad.sigmoid(ad.matmul(a, b)), 1e-7, 1 - 1e-7)),
        lambda a, b: ad.softmax_rows(ad.matmul(a, b)),
        lambda a, b: ad.powf(ad.exp(ad.mul(a, b)), -0.5),
        lambda a, b: ad.mul_rowvec(ad.matmul(a, b), ad.transpose(ad.sum_rows(b))),
        lambda a, b: ad.mul_colvec(ad.matmul(a, b), ad.sum_rows(a)),
        lambda a, b: ad.sub_rowvec(a, ad.sum_cols(b)),
        lambda a, b: ad.add_rowvec(a, ad.sum_cols(b)),
    ],
)
def test_gradients_match_finite_differences(build):
    rng = np.random.default_rng(11)
    a = ad.param(rng.normal(size=(3, 3)))
    b = ad.param(rng.normal(size=(3, 3)) * 0.5)

    def loss_value():
        return ad.sum_all(build(a, b)).item()

    loss = ad.sum_all(build(a, b))
    analytic = ad.backward(loss)
    numeric = finite_difference_gradients(loss_value, [a, b])
    assert max_relative_error(analytic, numeric) < 1e-4


def test_scalar_mul_gradients():
    rng = np.random.default_rng(3)
    a = ad.param(rng.normal(size=(3, 3)))
    s = ad.param([[0.7]])

    def loss_value():
        return ad.sum_all(ad.scalar_mul(ad.exp(a), s)).item()

    analytic = ad.backward(ad.sum_all(ad.scalar_mul(ad.exp(a), s)))
    numeric = finite_difference_gradients(loss_value, [a, s])
    assert max_relative_error(analytic, numeric) < 1e-4


def test_edge_ops_gradients():
    # Path graph 0-1-2-3 plus chord 0-2.
    ei = np.array([0, 1, 2, 0])
    ej = np.array([1, 2, 3, 2])
    rng = np.random.default_rng(5)
    e = ad.param(rng.uniform(0.2, 1.0, size=(4, 1)))
    h = ad.param(rng.normal(size=(4, 3)))

    def build():
        deg = ad.edge_degree(e, ei, ej, 4)
        dis = ad.powf(deg, -0.5)
        gated = ad.edge_gate(e, dis, ei, ej)
        prop = ad.edge_propagate(gated, h, ei, ej, 4)
        sage = ad.neighbor_mean(h, ei, ej, 4)
        return ad.sum_all(ad.mul(ad.add(prop, sage), ad.add(prop, sage)))

    analytic = ad.backward(build())
    numeric = finite_difference_gradients(lambda: build().item(), [e, h])
    assert max_relative_error(analytic, numeric) < 1e-4


def test_neighbor_mean_isolated_node_is_zero():
    h = ad.param(np.ones((3, 2)))
    out = ad.neighbor_mean(h, np.array([0]), np.array([1]), 3)
    assert np.array_equal(out.value[2], [0.0, 0.0])


def test_dropout_scales_and_is_seeded():
    x = ad.param(np.ones((100, 4)))
    d1 = ad.dropout(x, 0.4, np.random.default_rng(9)).value
    d2 = ad.dropout(x, 0.4, np.random.default_rng(9)).value
    assert np.array_equal(d1, d2)
    kept = d1[d1 > 0]
    assert np.allclose(kept, 1.0 / 0.6)


def test_adam_zero_gradient_keeps_params():
    p = ad.param([[1.0, -2.0]])
    state = ad.adam_init([p])
    ad.adam_step([p], {p: np.zeros((1, 2))}, state, lr=0.1)
    assert np.array_equal(p.value, [[1.0, -2.0]])


def test_adam_first_step_is_signed_lr():
    p = ad.param([[1.0]])
    state = ad.adam_init([p])
    g = np.array([[0.4]])
    # Bias-corrected first step: m_hat = g, v_hat = g^2, so delta = lr*g/(|g|+eps).
    ad.adam_step([p], {p: g}, state, lr=0.01)
    expected = 1.0 - 0.01 * 0.4 / (0.4 + 1e-8)
    assert p.value[0, 0] == pytest.approx(expected, abs=1e-12)


def test_adam_two_steps_match_recursion_on_quadratic():
    # Oracle: run the closed-form Adam recursion by hand for f(x) = x^2.
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x = 1.0
    m = v = 0.0
    trace = []
    for t in (1, 2):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(x)

    p = ad.param([[1.0]])
    state = ad.adam_init([p])
    for t in (1, 2):
        loss = ad.mul(p, p)
        grads = ad.backward(loss)
        ad.adam_step([p], grads, state, lr=lr)
        assert p.value[0, 0] == pytest.approx(trace[t - 1], abs=1e-12)
    assert p.value[0, 0] ** 2 < 1.0
