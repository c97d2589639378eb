import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tdplan.errors import DimensionError, NonFiniteError
from tdplan.nn import tensor as T
from tdplan.nn.gradcheck import directional_check, leaf, relative_error

TOL = 1e-6  # per-op central-difference tolerance (64-bit, h = 1e-6)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def check(fn, tensors, seed, tol=TOL):
    # probe stream independent of the data stream (same-seed probes can be degenerate)
    err = directional_check(fn, tensors, np.random.default_rng([seed, 7]))
    assert err < tol, err


UNARY = {
    "square": T.square,
    "exp": T.exp,
    "tanh": T.tanh,
    "softplus": T.softplus,
    "mish": T.mish,
    "gelu": T.gelu,
    "neg": lambda a: -a,
    "sum_axis": lambda a: T.sum_(a, axis=1),
    "mean": lambda a: T.mean(a, axis=0, keepdims=True),
    "reshape": lambda a: a.reshape(3, 4),
    "transpose": lambda a: a.transpose(1, 0),
    "slice": lambda a: a[1:, ::2],
    "fancy_index": lambda a: a[np.array([0, 2, 0])],
    "layer_norm": lambda a: T.layer_norm(a),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(5))
def test_unary_gradients(name, seed):
    r = np.random.default_rng(seed)
    a = leaf(r.standard_normal((4, 3)) if name != "layer_norm" else r.standard_normal((4, 6)))
    if name == "reshape":
        a = leaf(r.standard_normal((2, 6)))
    check(lambda: UNARY[name](a), [a], seed)


def test_relu_gradient_away_from_kink():
    a = leaf(np.array([[-2.0, 0.5], [1.5, -0.3]]))
    check(lambda: T.relu(a), [a], 0)


@pytest.mark.parametrize("seed", range(5))
def test_binary_broadcast_gradients(seed):
    r = np.random.default_rng(seed)
    a = leaf(r.standard_normal((2, 3, 4)))
    b = leaf(r.standard_normal((4,)))
    c = leaf(r.standard_normal((3, 1)))
    check(lambda: (a + b) * c - a * 0.5 + (b - c) / 3.0, [a, b, c], seed)


@pytest.mark.parametrize("seed", range(5))
def test_matmul_and_concat_gradients(seed):
    r = np.random.default_rng(seed)
    a = leaf(r.standard_normal((2, 3, 4)))
    w = leaf(r.standard_normal((4, 5)))
    b = leaf(r.standard_normal((2, 5, 3)))
    check(lambda: T.concat([a @ w, (a @ w) @ b], axis=-1), [a, w, b], seed)


@pytest.mark.parametrize("seed", range(5))
def test_fused_op_gradients(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.standard_normal((2, 7, 6)))
    gamma = leaf(r.standard_normal(6))
    beta = leaf(r.standard_normal(6))
    check(lambda: T.group_norm(x, 3, gamma, beta), [x, gamma, beta], seed)
    w = leaf(r.standard_normal((3, 6, 4)))
    bias = leaf(r.standard_normal(4))
    check(lambda: T.conv1d(x, w, bias), [x, w, bias], seed)
    s = leaf(r.standard_normal((2, 5, 5)))
    mask = np.tril(np.ones((5, 5), dtype=bool))
    check(lambda: T.masked_softmax(s, mask), [s], seed)
    p, q = leaf(r.standard_normal((3, 2))), r.standard_normal((3, 2))
    wts = r.random((3, 1))
    check(lambda: T.mse(p, q, wts), [p], seed)


def test_elementwise_examples():
    assert T.relu(T.Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert T.mish(T.Tensor([0.0])).data[0] == 0.0
    assert T.gelu(T.Tensor([0.0])).data[0] == 0.0


@given(arrays(np.float64, (5, 7), elements=finite))
def test_layer_norm_rows_standardised(x):
    x = x + np.linspace(0, 1, 7)  # keep every row non-constant
    y = T.layer_norm(T.Tensor(x), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-10)


def test_group_norm_groups_standardised(rng):
    x = rng.standard_normal((2, 6, 8)) * 4 + 2
    y = T.group_norm(T.Tensor(x), 2, eps=0.0).data.reshape(2, 6, 2, 4)
    np.testing.assert_allclose(y.mean(axis=(1, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(1, 3)), 1.0, atol=1e-10)


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.exp(T.Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0]) * np.inf


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))


def test_no_grad_builds_no_graph():
    a = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.square(a)
    assert y._parents == () and not y.requires_grad
    assert T.grad_enabled()


def test_gradient_accumulates_over_reuse():
    a = leaf([3.0])
    (a * a + a).sum().backward()
    assert a.grad.tolist() == [7.0]


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
