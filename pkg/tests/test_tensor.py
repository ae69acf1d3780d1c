import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharemoe import tensor as tn
from sharemoe.tensor import NonFiniteError, Rng, ShapeError, Tensor, UsageError

from conftest import gradcheck

finite = st.floats(-3, 3, allow_nan=False, width=64)


def param(shape, seed=0, low=None):
    data = np.random.default_rng(seed).standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return tn.parameter(data)


UNARY = {
    "exp": (tn.exp, None),
    "log": (tn.log, 0.5),
    "sqrt": (tn.sqrt, 0.5),
    "sigmoid": (tn.sigmoid, None),
    "swish": (tn.swish, None),
    "power": (lambda x: tn.power(x, 1.5), 0.5),
    "softmax": (lambda x: tn.softmax(x, axis=-1), None),
    "log_softmax": (lambda x: tn.log_softmax(x, axis=0), None),
    "row_norm": (tn.row_norm, None),
    "mean": (lambda x: tn.mean(x, axis=1, keepdims=True), None),
    "transpose": (lambda x: tn.transpose(x, (1, 0)), None),
    "getitem_basic": (lambda x: x[1:, ::2], None),
    "getitem_fancy": (lambda x: x[np.array([0, 2, 0]), np.array([1, 1, 1])], None),
    "where": (lambda x: tn.where(np.array([[True, False, True, True]] * 3), x, -5.0), None),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, low = UNARY[name]
    x = param((3, 4), low=low)
    w = Tensor(np.random.default_rng(9).standard_normal(fn(x).shape))
    errs = gradcheck(lambda: (fn(x) * w).sum(), [("x", x)])
    assert errs["x"] < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_gradients(op):
    a = param((2, 3, 4), 0)
    b = param((3, 1), 1, low=0.5)
    fn = getattr(tn, op)
    w = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4)))
    errs = gradcheck(lambda: (fn(a, b) * w).sum(), [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-6


def test_matmul_batched_gradients():
    a = param((2, 3, 4), 0)
    b = param((4, 5), 1)
    errs = gradcheck(lambda: (tn.matmul(a, b) ** 2).sum(), [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-6


def test_concat_stack_gradients():
    a, b = param((2, 3), 0), param((1, 3), 1)
    errs = gradcheck(lambda: (tn.concat([a, b, a], 0) ** 2).sum() + tn.stack([a, a * 2], 1).sum(),
                     [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-6


def test_depthwise_conv_gradients_and_same_padding():
    x = param((2, 6, 3), 0)
    w = param((3, 5), 1)
    b = param((3,), 2)
    errs = gradcheck(lambda: (tn.depthwise_conv1d(x, w, b) ** 2).sum(), [("x", x), ("w", w), ("b", b)])
    assert max(errs.values()) < 1e-6
    # direct oracle: zero-padded correlation per channel
    y = tn.depthwise_conv1d(x, w, b).data
    xp = np.pad(x.data, ((0, 0), (2, 2), (0, 0)))
    ref = np.stack([sum(xp[:, t + j] * w.data[:, j] for j in range(5)) for t in range(6)], axis=1) + b.data
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_unfold2d_gradients_and_shape():
    x = param((1, 9, 7, 2), 0)
    out = tn.unfold2d(x, 3, 2)
    assert out.shape == (1, 4, 3, 18)
    np.testing.assert_array_equal(out.data[0, 1, 2].reshape(3, 3, 2), x.data[0, 2:5, 4:7])
    errs = gradcheck(lambda: (tn.unfold2d(x, 3, 2) ** 2).sum(), [("x", x)])
    assert errs["x"] < 1e-6


def test_reuse_accumulates_gradient():
    x = tn.parameter(np.array([3.0]))
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_backward_requires_scalar_and_tape():
    x = tn.parameter(np.ones(3))
    with pytest.raises(UsageError):
        (x * 2).backward()
    with pytest.raises(UsageError):
        Tensor(np.ones(())).backward()


def test_no_grad_records_nothing():
    x = tn.parameter(np.ones(3))
    with tn.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad
    with pytest.raises(UsageError):
        y.backward()
    assert (x * 2).sum().requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises_with_op_name():
    with pytest.raises(NonFiniteError, match="log"):
        tn.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_softmax_example():
    g = tn.softmax(Tensor(np.array([2.0, 0, 0, 0]))).data
    np.testing.assert_allclose(g, [0.71123, 0.09626, 0.09626, 0.09626], atol=5e-6)


def test_row_norm_subgradient_at_zero():
    x = tn.parameter(np.zeros((2, 3)))
    tn.row_norm(x).sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = tn.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tn.log_softmax(Tensor(x)).data, np.log(np.maximum(p, 1e-300)), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (2,), elements=finite))
def test_broadcast_add_grad_reduces_to_operand_shape(a, b):
    ta, tb = tn.parameter(a.copy()), tn.parameter(b.copy())
    (ta + tb).sum().backward()
    np.testing.assert_array_equal(ta.grad, np.ones((3, 2)))
    np.testing.assert_array_equal(tb.grad, np.full(2, 3.0))


def test_rng_children_are_independent_and_reproducible():
    a = Rng(5).child("init").normal(4)
    b = Rng(5).child("init").normal(4)
    c = Rng(5).child("noise").normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    # drawing from one child does not move another
    r = Rng(5)
    x = r.child("noise")
    x.normal(100)
    np.testing.assert_array_equal(r.child("init").normal(4), a)


def test_gaussian_statistics_and_arguments():
    s = tn.gaussian(Rng(0), (100_000,), 0.1).data
    assert 0.098 <= s.std() <= 0.102
    assert abs(s.mean()) < 0.002
    np.testing.assert_array_equal(tn.gaussian(Rng(0), (5,), 0.0).data, 0.0)
    with pytest.raises(ValueError):
        tn.gaussian(Rng(0), (5,), -1.0)


def test_op_counter_counts_macs_per_scope():
    a = tn.parameter(np.ones((3, 4)))
    b = Tensor(np.ones((4, 5)))
    with tn.count_ops() as c:
        with tn.op_scope("x"):
            tn.matmul(a, b)
        tn.exp(Tensor(np.ones(7)))
    assert c.macs["x"] == 3 * 4 * 5
    assert c.elementwise[""] == 7
    assert c.params_touched("x") == 12
