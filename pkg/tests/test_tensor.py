import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from moerl import tensor as T
from moerl.gradcheck import finite_diff_check, numerical_grad
from moerl.tensor import NonFiniteError, NonScalarError, Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# ------------------------------------------------------------ forward values


def test_elementwise_forward_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2, size=(3, 4))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_array_equal((ta + tb).data, a + b)
    np.testing.assert_array_equal((ta - tb).data, a - b)
    np.testing.assert_array_equal((ta * tb).data, a * b)
    np.testing.assert_array_equal((ta / tb).data, a / b)
    np.testing.assert_array_equal(T.relu(ta).data, np.maximum(a, 0))
    np.testing.assert_array_equal(T.exp(ta).data, np.exp(a))
    np.testing.assert_array_equal(T.log(tb).data, np.log(b))
    np.testing.assert_array_equal(T.sqrt(tb).data, np.sqrt(b))


def test_huber_piecewise():
    x = Tensor(np.array([-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0]))
    expected = [2.5, 0.5, 0.125, 0.0, 0.125, 0.5, 2.5]
    np.testing.assert_allclose(T.huber(x, 1.0).data, expected, rtol=0, atol=1e-15)


def _mp_softmax(row):
    with mpmath.workdps(50):
        m = max(mpmath.mpf(float(v)) for v in row)
        e = [mpmath.exp(mpmath.mpf(float(v)) - m) for v in row]
        s = mpmath.fsum(e)
        return [float(v / s) for v in e]


def test_softmax_matches_high_precision_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=30, size=(6, 5))
    got = T.softmax(Tensor(x), axis=-1).data
    want = np.array([_mp_softmax(r) for r in x])
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-300)


def test_softmax_named_axes():
    x = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_array_equal(T.softmax(Tensor(x), "rows").data, T.softmax(Tensor(x), -1).data)
    np.testing.assert_array_equal(T.softmax(Tensor(x), "columns").data, T.softmax(Tensor(x), -2).data)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        T.softmax(Tensor(np.array([[0.0, np.nan]])))
    with pytest.raises(NonFiniteError):
        T.softmax(Tensor(np.array([[0.0, np.inf]])))


def test_logsumexp_stable_for_large_inputs():
    x = np.array([[1000.0, 1000.0], [-1000.0, -1000.0]])
    np.testing.assert_allclose(T.logsumexp(Tensor(x), axis=1).data,
                               [1000 + math.log(2), -1000 + math.log(2)], rtol=1e-15)


def _naive_conv(x, k, stride):
    h, w, c = x.shape
    kk, _, _, o = k.shape
    oh, ow = (h - kk) // stride + 1, (w - kk) // stride + 1
    out = np.zeros((oh, ow, o))
    for i in range(oh):
        for j in range(ow):
            for f in range(o):
                s = 0.0
                for di in range(kk):
                    for dj in range(kk):
                        for ch in range(c):
                            s += x[i * stride + di, j * stride + dj, ch] * k[di, dj, ch, f]
                out[i, j, f] = s
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_naive_loops(stride):
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(5, 5, 2)), rng.normal(size=(3, 3, 2, 4))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), stride).data,
                               _naive_conv(x, k, stride), rtol=0, atol=1e-12)


def test_conv2d_batched_equals_per_sample():
    rng = np.random.default_rng(4)
    x, k = rng.normal(size=(3, 6, 6, 2)), rng.normal(size=(3, 3, 2, 5))
    batched = T.conv2d(Tensor(x), Tensor(k), 1).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], _naive_conv(x[b], k, 1), atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((5, 5, 2))), Tensor(np.zeros((3, 3, 1, 4))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))


# ------------------------------------------------------------ gradients


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_grads(op):
    rng = np.random.default_rng(5)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.uniform(1, 2, size=(4,)))
    fn = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}[op]
    r = rng.normal(size=(3, 4))
    assert finite_diff_check(lambda: T.sum_(fn(a, b) * r), [a, b], 1e-6) < 1e-7


@pytest.mark.parametrize("fn", [T.exp, T.square, T.abs_, lambda x: T.huber(x, 1.0),
                                lambda x: T.softmax(x, -1), lambda x: T.softmax(x, -2),
                                lambda x: T.logsumexp(x, 1), lambda x: T.transpose(x, (1, 0)),
                                lambda x: T.reshape(x, (6, 2)), lambda x: T.mean(x, axis=0)])
def test_unary_grads(fn):
    rng = np.random.default_rng(6)
    x = leaf(rng.normal(size=(3, 4)) + 0.05)
    out_shape = fn(x).shape
    r = rng.normal(size=out_shape)
    assert finite_diff_check(lambda: T.sum_(fn(x) * r), [x], 1e-6) < 1e-6


def test_log_sqrt_grads():
    x = leaf(np.random.default_rng(7).uniform(0.5, 3, size=(5,)))
    assert finite_diff_check(lambda: T.sum_(T.log(x) + T.sqrt(x)), [x], 1e-6) < 1e-7


def test_relu_grad_zero_at_kink():
    x = leaf([-1.0, 0.0, 2.0])
    g = T.grad(T.sum_(T.relu(x)), [x])[0]
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_batched_matmul_grad():
    rng = np.random.default_rng(8)
    a, b = leaf(rng.normal(size=(2, 3, 4, 5))), leaf(rng.normal(size=(3, 5, 2)))
    r = rng.normal(size=(2, 3, 4, 2))
    assert finite_diff_check(lambda: T.sum_((a @ b) * r), [a, b], 1e-6) < 1e-7


def test_getitem_accumulates_repeated_indices():
    x = leaf(np.arange(4.0))
    g = T.grad(T.sum_(x[np.array([0, 0, 2])]), [x])[0]
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0, 0.0])


def test_concat_and_swapaxes_grad():
    rng = np.random.default_rng(9)
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 2)))
    r = rng.normal(size=(5, 2))
    f = lambda: T.sum_(T.swapaxes(T.concat([a, b], axis=1), 0, 1) * r)
    assert finite_diff_check(f, [a, b], 1e-6) < 1e-8


def test_shared_subexpression_grad():
    x = leaf([1.5, -0.5])
    y = x * x
    loss = T.sum_(y + y * x)
    g = T.grad(loss, [x])[0]
    np.testing.assert_allclose(g, 2 * x.data + 3 * x.data ** 2)


def test_backward_requires_scalar():
    with pytest.raises(NonScalarError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_grad_of_unused_leaf_is_zero():
    x, y = leaf([1.0]), leaf([[2.0, 3.0]])
    gx, gy = T.grad(T.sum_(x * 3.0), [x, y])
    np.testing.assert_array_equal(gx, [3.0])
    np.testing.assert_array_equal(gy, np.zeros((1, 2)))


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.exp(x) * 2.0
        assert not T.is_grad_enabled()
    assert T.is_grad_enabled()
    assert y._parents == () and y._backward is None


def test_topological_order_is_deterministic():
    x = leaf([1.0, 2.0])
    out = T.sum_(T.exp(x) * x + x)
    ids = [t.op for t in T.topological_order(out)]
    assert ids == [t.op for t in T.topological_order(out)]
    assert T.topological_order(out)[-1] is out


def test_trainable_leaves_found():
    a, b, c = leaf([1.0]), Tensor([2.0]), leaf([3.0])
    leaves = T.trainable_leaves(T.sum_(a * b + c))
    assert set(map(id, leaves)) == {id(a), id(c)}


def test_check_finite_names_layer():
    with pytest.raises(NonFiniteError, match="pen"):
        T.check_finite(Tensor([np.nan]), "pen")


def test_deep_chain_no_recursion_limit():
    x = leaf([0.5])
    y = x
    for _ in range(5000):
        y = y * 1.0
    g = T.grad(T.sum_(y), [x])[0]
    assert g[0] == 1.0


def test_gradcheck_eps_range_enforced():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        finite_diff_check(lambda: T.sum_(x), [x], eps=1e-2)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: T.sum_(x), [x], eps=1e-9)


def test_numerical_grad_restores_params():
    x = leaf(np.random.default_rng(10).normal(size=(3,)))
    before = x.data.copy()
    numerical_grad(lambda: T.sum_(T.exp(x)), x, 1e-5)
    np.testing.assert_array_equal(x.data, before)


def test_gradcheck_detects_wrong_gradient():
    x = leaf([0.3, 0.7])

    def bad():
        out = T.sum_(x * 2.0)
        out._backward = lambda g: [None]   # sabotage: claims zero gradient
        return out

    assert finite_diff_check(bad, [x], 1e-6) > 1.0


# ------------------------------------------------------------ properties


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=7), elements=finite))
def test_softmax_rows_are_distributions(x):
    y = T.softmax(Tensor(x), -1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite),
       st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x + c), -1).data, T.softmax(Tensor(x), -1).data,
                               atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.booleans(), st.booleans())
def test_broadcast_grad_shapes(r, c, keep_rows, keep_cols):
    shape_b = (r if keep_rows else 1, c if keep_cols else 1)
    a, b = leaf(np.ones((r, c))), leaf(np.ones(shape_b))
    ga, gb = T.grad(T.sum_(a * b), [a, b])
    assert ga.shape == (r, c) and gb.shape == shape_b
    assert gb.sum() == pytest.approx(r * c)
