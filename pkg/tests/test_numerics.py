import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from udarc import numerics as nx
from udarc.numerics import _pykernels, kernels

import gradcheck


def T(x, grad=False):
    return nx.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def test_matmul_hand_example():
    out = nx.matmul(T([[1, 2], [3, 4]]), T([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(nx.matmul(T(a), T(np.eye(3))).data, a)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((4, 5))))


@pytest.mark.parametrize("row, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([0.0, math.log(3.0)], [0.25, 0.75]),
])
def test_softmax_examples(row, expected):
    np.testing.assert_allclose(nx.softmax_rows(T([row])).data[0], expected, rtol=0, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(nx.NumericError):
        nx.softmax_rows(T([[0.0, np.inf]]))


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
                     elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False))


@given(finite_rows, st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = nx.softmax_rows(T(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax_rows(T(x + c)).data, y, rtol=0, atol=1e-12)


def test_layer_norm_examples():
    ones, zeros = T(np.ones(4)), T(np.zeros(4))
    np.testing.assert_array_equal(nx.layer_norm(T([[3.0] * 4]), ones, zeros, 1e-12).data, np.zeros((1, 4)))
    out = nx.layer_norm(T([[1.0, -1.0]]), T([1.0, 1.0]), T([0.0, 0.0]), 1e-300).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-12)
    bias = np.array([0.5, -2.0, 3.0])
    x = np.random.default_rng(1).normal(size=(5, 3))
    out = nx.layer_norm(T(x), T(np.zeros(3)), T(bias), 1e-12).data
    np.testing.assert_array_equal(out, np.broadcast_to(bias, (5, 3)))


def test_layer_norm_requires_positive_eps():
    with pytest.raises(ValueError):
        nx.layer_norm(T([[1.0, 2.0]]), T([1.0, 1.0]), T([0.0, 0.0]), 0.0)


def test_gelu_examples():
    assert nx.gelu(T([0.0])).data[0] == 0.0
    assert abs(nx.gelu(T([10.0])).data[0] - 10.0) < 1e-6
    # x * Phi(x) at 1 with Phi from math.erf
    expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert abs(nx.gelu(T([1.0])).data[0] - expected) < 1e-15
    assert round(expected, 4) == 0.8413
    assert abs(nx.gelu(T([1.0]), approximate=True).data[0] - expected) < 1e-3


def test_cross_entropy_examples():
    assert abs(nx.cross_entropy_logits(T([[0.0, 0.0]]), [0]).item() - math.log(2)) < 1e-12
    assert nx.cross_entropy_logits(T([[1e3, 0.0, 0.0]]), [0]).item() < 1e-12
    n = 7
    assert abs(nx.cross_entropy_logits(T(np.zeros((3, n))), [0, 3, 6]).item() - math.log(n)) < 1e-12


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy_logits(T([[0.0, 1.0]]), [2])


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)), st.data())
@settings(max_examples=60, deadline=None)
def test_cross_entropy_nonnegative(x, data):
    targets = data.draw(st.lists(st.integers(0, x.shape[1] - 1), min_size=x.shape[0], max_size=x.shape[0]))
    assert nx.cross_entropy_logits(T(x), targets).item() >= 0.0


def test_backward_sum_gives_ones():
    x = T(np.random.default_rng(2).normal(size=(2, 3, 4)), grad=True)
    with nx.Tape() as tape:
        loss = nx.sum_all(x)
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square_gives_2x():
    x = T([1.5, -2.0, 0.25], grad=True)
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.mul(x, x))
    nx.backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_across_uses_and_calls():
    x = T([1.0, 2.0], grad=True)
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.add(x, nx.scale(x, 3.0)))
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    with nx.Tape() as tape:
        loss = nx.sum_all(x)
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_backward_contract_errors():
    x = T([1.0, 2.0], grad=True)
    with nx.Tape() as tape:
        y = nx.scale(x, 2.0)
    with pytest.raises(nx.ContractError):
        nx.backward(tape, y)
    with nx.Tape() as other:
        loss = nx.sum_all(x)
    with pytest.raises(nx.ContractError):
        nx.backward(tape, loss)
    nx.backward(other, loss)
    with pytest.raises(nx.ContractError):
        nx.backward(other, loss)


def test_no_tape_records_nothing():
    x = T([1.0], grad=True)
    y = nx.scale(x, 2.0)
    assert not y.requires_grad


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    grads = [gradcheck.analytic_grads(lambda x, y: nx.sum_all(nx.gelu(nx.matmul(x, y))), [a, b]) for _ in range(2)]
    for g1, g2 in zip(*grads):
        assert g1.tobytes() == g2.tobytes()


def test_dropout_zero_is_identity_and_scaled_otherwise():
    x = T(np.ones((50, 40)))
    assert nx.dropout(x, 0.0, None) is x
    out = nx.dropout(x, 0.1, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.9}
    assert abs((out == 0).mean() - 0.1) < 0.03


def test_take_and_gather_ops():
    x = T(np.arange(24.0).reshape(2, 3, 4))
    np.testing.assert_array_equal(nx.take_last(x, 1).data, x.data[..., 1])
    np.testing.assert_array_equal(nx.take_first(x, 1).data, x.data[1])
    np.testing.assert_array_equal(nx.gather_rows(nx.reshape(x, (6, 4)), [5, 0]).data, x.data.reshape(6, 4)[[5, 0]])
    with pytest.raises(IndexError):
        nx.embedding(T(np.zeros((3, 2))), [3])


# --- both kernel backends agree -------------------------------------------------

@pytest.mark.skipif("native" not in kernels.available_backends(), reason="compiled kernels not built")
def test_native_kernels_match_python():
    native = kernels.get_backend("native")
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 9)) * 3
    dy = rng.normal(size=(7, 9))
    gain, bias = rng.normal(size=9), rng.normal(size=9)
    for name in ("softmax_forward",):
        np.testing.assert_allclose(getattr(native, name)(x), getattr(_pykernels, name)(x), rtol=1e-13, atol=1e-15)
    y = _pykernels.softmax_forward(x)
    np.testing.assert_allclose(native.softmax_backward(y, dy), _pykernels.softmax_backward(y, dy), atol=1e-14)
    for a, b in zip(native.layer_norm_forward(x, gain, bias, 1e-12), _pykernels.layer_norm_forward(x, gain, bias, 1e-12)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    _, xhat, rstd = _pykernels.layer_norm_forward(x, gain, bias, 1e-12)
    for a, b in zip(native.layer_norm_backward(dy, xhat, rstd, gain), _pykernels.layer_norm_backward(dy, xhat, rstd, gain)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    for approx in (False, True):
        np.testing.assert_allclose(native.gelu_forward(x, approx), _pykernels.gelu_forward(x, approx), rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(native.gelu_backward(x, dy, approx), _pykernels.gelu_backward(x, dy, approx),
                                   rtol=1e-13, atol=1e-15)
    s, e = rng.normal(size=30), rng.normal(size=30)
    for lo, hi, m in [(3, 25, 5), (0, 29, 30), (10, 9, 4), (4, 4, 1)]:
        assert native.best_span(s, e, lo, hi, m) == _pykernels.best_span(s, e, lo, hi, m)


def test_backend_selection():
    assert kernels.BACKEND in kernels.available_backends()
    with pytest.raises(ValueError):
        kernels.get_backend("gpu")
