import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscsanet.tensor import (
    DimensionError,
    NumericError,
    Tensor,
    concat,
    gradcheck,
    no_grad,
    set_nan_checks,
    split,
)


def test_elementwise_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = np.abs(rng.standard_normal((3, 4))) + 1.0
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_array_equal((ta + tb).data, a + b)
    np.testing.assert_array_equal((ta - tb).data, a - b)
    np.testing.assert_array_equal((ta * tb).data, a * b)
    np.testing.assert_array_equal((ta / tb).data, a / b)
    np.testing.assert_array_equal((-ta).data, -a)
    np.testing.assert_array_equal((ta**2).data, a**2)
    np.testing.assert_array_equal(tb.sqrt().data, np.sqrt(b))
    np.testing.assert_array_equal(ta.exp().data, np.exp(a))


def test_diamond_graph_gradient():
    x = Tensor(np.array([1.5, -2.0, 3.0]), requires_grad=True)
    y = (x * x + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradients_unbroadcast():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a * b).sum().backward()
    assert a.grad.shape == (3, 1)
    assert b.grad.shape == (1, 4)
    np.testing.assert_array_equal(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_scalar_broadcast_gradient():
    s = Tensor(2.0, requires_grad=True)
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    (s * x).sum().backward()
    assert s.grad.shape == ()
    assert float(s.grad) == x.data.sum()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2).backward()


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(1).standard_normal((5, 7)))
    s = x.softmax(axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)
    assert (s > 0).all()


def test_log_softmax_consistent_with_softmax():
    x = Tensor(np.random.default_rng(2).standard_normal((4, 6)) * 30)
    np.testing.assert_allclose(
        x.log_softmax(axis=1).data, np.log(x.softmax(axis=1).data), atol=1e-9
    )


def test_softmax_shift_invariance():
    x = np.random.default_rng(3).standard_normal((2, 5))
    a = Tensor(x).softmax(axis=-1).data
    b = Tensor(x + 1000.0).softmax(axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_matmul_matches_numpy_batched():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 5))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)


def test_take_flat_duplicate_indices_accumulate():
    x = Tensor(np.arange(6.0), requires_grad=True)
    idx = np.array([1, 1, 4])
    y = x.take_flat(idx)
    np.testing.assert_array_equal(y.data, [1.0, 1.0, 4.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 2, 0, 0, 1, 0])


def test_concat_split_roundtrip():
    rng = np.random.default_rng(5)
    parts = [Tensor(rng.standard_normal((2, c, 3))) for c in (1, 2, 4)]
    joined = concat(parts, axis=1)
    assert joined.shape == (2, 7, 3)
    back = split(joined, [1, 2, 4], axis=1)
    for p, b in zip(parts, back):
        np.testing.assert_array_equal(p.data, b.data)


def test_split_sizes_must_cover_axis():
    x = Tensor(np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        split(x, [2, 2], axis=1)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad
    assert y._parents == ()


def test_nan_check_raises():
    x = Tensor(np.array([0.0]), requires_grad=True)
    set_nan_checks(True)
    try:
        with pytest.raises(NumericError), np.errstate(divide="ignore"):
            x.log()
    finally:
        set_nan_checks(False)
    with np.errstate(divide="ignore"):
        x.log()  # produces -inf silently when checks are off


def test_mean_keepdims_and_axis():
    x = np.random.default_rng(6).standard_normal((2, 3, 4))
    t = Tensor(x)
    np.testing.assert_allclose(t.mean(axis=(0, 2)).data, x.mean(axis=(0, 2)))
    np.testing.assert_allclose(
        t.sum(axis=1, keepdims=True).data, x.sum(axis=1, keepdims=True)
    )


def test_swap_last_transposes_trailing_axes():
    x = np.random.default_rng(7).standard_normal((2, 3, 4))
    np.testing.assert_array_equal(Tensor(x).swap_last().data, np.swapaxes(x, -1, -2))


def test_gradient_accumulates_across_uses():
    x = Tensor(np.array([3.0]), requires_grad=True)
    ((x * 2).sum() + (x * 5).sum()).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_gradcheck_flags_wrong_gradient():
    # a deliberately broken op: forward x^2 but gradient of x
    def bad(x):
        return Tensor._result(
            (x.data**2).sum(),
            (x,),
            lambda g: x._accum(np.full_like(x.data, g)),
        )

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(AssertionError):
        gradcheck(bad, [x], rtol=1e-4)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=3).map(tuple),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_add_mul_property(shape, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    np.testing.assert_array_equal((Tensor(a) + Tensor(b)).data, a + b)
    np.testing.assert_array_equal((Tensor(a) * Tensor(b)).data, a * b)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_sum_of_product_gradcheck_property(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3,)), requires_grad=True)
    err = gradcheck(lambda a, b: (a * b + b).sum(), [a, b])
    assert err < 1e-6
