import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from petal import engine as E
from petal.engine import Tensor, finite_diff_check
from petal.errors import ContractError, DimensionError, NumericError, OracleError, TapeError


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_grad_matches_closed_form():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 5, 7), rand(rng, 7, 3)
    E.backward(E.tsum(a @ b))
    np.testing.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, rtol=1e-12)
    assert finite_diff_check(lambda t: E.tsum(t @ b), a) <= 1e-4


def test_linear_map_grad_is_transpose_times_ones():
    rng = np.random.default_rng(1)
    W = Tensor(rng.normal(size=(4, 6)))
    x = rand(rng, 6, 1)
    E.backward(E.tsum(W @ x))
    np.testing.assert_allclose(x.grad, W.data.T @ np.ones((4, 1)))


def test_softmax_sum_has_zero_grad():
    z = Tensor(np.random.default_rng(2).normal(size=(3, 5)), requires_grad=True)
    E.backward(E.tsum(E.softmax(z)))
    assert np.abs(z.grad).max() < 1e-12


def test_softmax_extreme_logits_stay_finite():
    out = E.softmax(Tensor([1000.0, 0.0])).data
    assert out[0] == 1.0 and out[1] == 0.0


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        E.softmax(Tensor([np.nan, 0.0]))


def test_log_rejects_negative():
    with pytest.raises(NumericError):
        E.log(Tensor([-1.0]))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        E.backward(x * 2.0)


def test_second_backward_on_same_tape_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = E.tsum(x * x)
    E.backward(loss)
    with pytest.raises(TapeError):
        E.backward(loss)


def test_matmul_dimension_error():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_quadratic_is_exact():
    theta = Tensor(np.random.default_rng(3).normal(size=6), requires_grad=True)
    assert finite_diff_check(lambda t: E.tsum(t * t) * 0.5, theta) <= 1e-10


def test_matmul_chain():
    rng = np.random.default_rng(4)
    A, C = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 2)))
    theta = rand(rng, 4, 5)
    assert finite_diff_check(lambda t: E.tsum(E.tanh(A @ t @ C)), theta) <= 1e-4


def test_nondeterministic_function_is_flagged():
    rng = np.random.default_rng(5)
    theta = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(OracleError):
        finite_diff_check(lambda t: E.tsum(t * float(rng.normal())), theta)


def test_argmax_kink_passes_after_jitter():
    # |x| has a kink at 0; a jittered point away from it checks cleanly
    theta = Tensor(np.array([0.0, 0.0]) + np.array([0.3, -0.2]), requires_grad=True)
    f = lambda t: E.tsum(E.power(t * t, 0.5))
    assert finite_diff_check(f, theta) <= 1e-4


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with E.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_broadcast_grad_is_reduced():
    rng = np.random.default_rng(6)
    a, b = rand(rng, 4, 3), rand(rng, 3)
    E.backward(E.tsum(a * b))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


def test_layer_norm_and_cross_entropy_grads():
    rng = np.random.default_rng(7)
    w, b = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
    labels = np.array([0, 3, 1])
    x = rand(rng, 3, 5)
    assert finite_diff_check(lambda t: E.cross_entropy(E.layer_norm(t, w, b), labels), x) <= 1e-4


UNARY = {
    "exp": E.exp,
    "tanh": E.tanh,
    "gelu": E.gelu,
    "sqrt": lambda t: E.sqrt(t * t + 1.0),
    "log": lambda t: E.log(t * t + 1.0),
    "softmax": lambda t: E.softmax(t, axis=-1),
    "log_softmax": lambda t: E.log_softmax(t, axis=-1),
    "power": lambda t: E.power(t * t + 1.0, 1.5),
    "mean": lambda t: E.mean(t, axis=0, keepdims=True),
    "transpose": lambda t: E.transpose(t),
    "reshape": lambda t: E.reshape(t, (-1,)),
    "getitem": lambda t: t[::2],
    "concat": lambda t: E.concat([t, t * 2.0], axis=0),
    "stack": lambda t: E.stack([t, t], axis=1),
    "div": lambda t: t / (t * t + 2.0),
    "sub": lambda t: 1.0 - t,
}

shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=100, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_every_op_passes_finite_differences(name, shape, seed):
    rng = np.random.default_rng(seed)
    weights = Tensor(rng.normal(size=np.shape(UNARY[name](Tensor(np.zeros(shape))).data)))
    theta = Tensor(rng.normal(size=shape), requires_grad=True)
    assert finite_diff_check(lambda t: E.tsum(UNARY[name](t) * weights), theta) <= 1e-4


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = E.softmax(Tensor(x), axis=-1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
