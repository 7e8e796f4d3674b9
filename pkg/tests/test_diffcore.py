import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdat import diffcore as dc
from mdat.selfcheck import primitive_gradient_errors


@pytest.fixture(scope="module")
def fd_errors():
    return primitive_gradient_errors(seed=3)


PRIMITIVES = list(primitive_gradient_errors(seed=0))


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_matches_finite_differences(fd_errors, name):
    assert fd_errors[name] < 1e-4


def naive_conv(x, w):
    n, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[0]))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i:i + 3, j:j + 3, :]  # n,3,3,cin
            out[:, i, j, :] = np.einsum("nabc,ocab->no", patch, w)
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_conv2d_matches_loop_oracle(n, h, w, cin, cout, seed):
    rng = np.random.default_rng(seed)
    x, k = rng.standard_normal((n, h, w, cin)), rng.standard_normal((cout, cin, 3, 3))
    np.testing.assert_allclose(dc.conv2d(x, k).data, naive_conv(x, k), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10**6))
def test_max_pool_matches_loop_oracle(n, h2, w2, c, seed):
    x = np.random.default_rng(seed).standard_normal((n, 2 * h2, 2 * w2, c))
    want = x.reshape(n, h2, 2, w2, 2, c).max(axis=(2, 4))
    np.testing.assert_array_equal(dc.max_pool2x2(x).data, want)


def test_max_pool_tie_routes_gradient_once():
    x = dc.DiffValue(np.ones((1, 2, 2, 1)), requires_grad=True)
    g = dc.Graph()
    with g.record():
        out = dc.sum(dc.max_pool2x2(x))
    g.backward(out)
    assert x.grad.sum() == 1.0
    assert x.grad[0, 0, 0, 0] == 1.0


def test_batch_norm_standardizes_channels():
    x = np.random.default_rng(0).normal(3.0, 2.0, (4, 5, 5, 3))
    y = dc.batch_norm(x, np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1, atol=1e-5)


def test_sign_of_zero_is_zero():
    np.testing.assert_array_equal(dc.sign(np.array([-2.0, 0.0, 3.0])), [-1.0, 0.0, 1.0])


def _grads(fn, *arrays):
    leaves = [dc.DiffValue(a, requires_grad=True) for a in arrays]
    g = dc.Graph()
    with g.record():
        out = fn(*leaves)
    g.backward(out)
    return [l.grad for l in leaves]


def test_backward_is_linear_in_the_output():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 4))
    f = lambda x: dc.sum(dc.softmax(x))
    h = lambda x: dc.sum(dc.mul(dc.leaky_relu(x), x))
    (gf,), (gh,) = _grads(f, a), _grads(h, a)
    (gc,) = _grads(lambda x: dc.add(dc.scale(f(x), 2.0), dc.scale(h(x), -0.5)), a)
    np.testing.assert_allclose(gc, 2.0 * gf - 0.5 * gh, atol=1e-12)


def test_repeated_runs_are_bit_identical():
    rng = np.random.default_rng(2)
    x, k = rng.standard_normal((2, 4, 4, 3)), rng.standard_normal((5, 3, 3, 3))
    fn = lambda x, k: dc.sum(dc.mul(dc.max_pool2x2(dc.leaky_relu(dc.conv2d(x, k))), 1.0))
    first, second = _grads(fn, x, k), _grads(fn, x, k)
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_shared_subexpression_accumulates():
    (g,) = _grads(lambda x: dc.sum(dc.mul(x, x)), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_input_gradient_leaves_parameters_untouched():
    rng = np.random.default_rng(3)
    w = dc.parameter(rng.standard_normal((4, 2)))
    w.grad[...] = 7.0
    x = dc.DiffValue(rng.standard_normal((3, 4)), requires_grad=True)
    g = dc.Graph()
    with g.record():
        loss = dc.sum(dc.mul(dc.matmul(x, w), dc.matmul(x, w)))
    gx = dc.input_gradient(g, loss, x)
    np.testing.assert_allclose(gx, 2 * (x.data @ w.data) @ w.data.T)
    assert np.all(w.grad == 7.0)


def test_unreached_leaf_gets_zero_gradient():
    a = dc.parameter(np.ones(3))
    b = dc.parameter(np.ones(2))
    g = dc.Graph()
    with g.record():
        out = dc.sum(a)
        dc.sum(b)
    g.backward(out)
    assert np.all(b.grad == 0)


def test_non_finite_forward_is_reported_with_the_op():
    g = dc.Graph()
    with pytest.raises(dc.NonFiniteError) as info:
        with g.record():
            dc.log(dc.parameter(np.array([-1.0, 1.0])))
    assert info.value.op == "log"


def test_backward_needs_scalar_and_a_forward_pass():
    with pytest.raises(dc.GraphError):
        dc.Graph().backward(dc.constant(1.0))
    g = dc.Graph()
    with g.record():
        out = dc.mul(dc.parameter(np.ones(2)), 2.0)
    with pytest.raises(dc.GraphError):
        g.backward(out)


def test_evaluate_reruns_the_forward_function():
    g = dc.Graph(lambda a, b: dc.sum(dc.mul(a, b)))
    a = dc.parameter(np.array([1.0, 2.0]))
    out = dc.evaluate(g, {"a": a, "b": np.array([3.0, 4.0])})
    assert out.item() == 11.0
    dc.backward(g)
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])


def test_finite_difference_check_catches_a_wrong_backward():
    def bad_square(x):
        x = dc.as_value(x)
        return dc.primitive("bad_square", x.data ** 2, (x,), lambda g, mask: (g * x.data,))

    err = dc.finite_difference_check(dc.Graph(lambda x: dc.sum(bad_square(x))), {"x": np.array([0.5, -1.5])}, "x")
    assert err > 0.1
