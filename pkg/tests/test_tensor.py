import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ismrnn import tensor as T
from ismrnn.errors import ContractError, NumericError, ParameterError, ShapeError, StateError
from ismrnn.tensor import Tape, Tensor


def grad_of(build, *arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        out = build(*leaves)
        T.backward(out)
    return [l.grad for l in leaves]


def fd_check(build, *arrays, tol=1e-6):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = grad_of(build, *arrays)
    numeric, masks = T.finite_difference_gradient(
        lambda: build(*[Tensor(a) for a in arrays]).item(), arrays)
    for a, n, m in zip(analytic, numeric, masks):
        assert T.relative_error(a, n)[m].max(initial=0.0) < tol


# -- primitive examples ----------------------------------------------------------------

def test_affine_identity():
    out = T.affine(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_softplus_zero_is_ln2():
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)


def test_mean_of_constant():
    assert np.all(T.mean(Tensor(np.full((3, 5), 2.5)), axis=1).data == 2.5)


def test_primitive_catalogue_complete():
    names = set(T.primitive_set())
    assert {"matmul", "affine", "add", "mul", "sub", "neg", "sigmoid", "tanh", "silu", "softplus",
            "exp", "concat", "getitem", "reshape", "transpose", "mean", "dropout", "scan"} <= names


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ParameterError):
        T.dropout(Tensor(np.ones(3)), p, np.random.default_rng(0), True)


# -- backward examples -----------------------------------------------------------------

def test_backward_sum_of_squares():
    (g,) = grad_of(lambda x: T.sum_(x * x), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(g, [2.0, -4.0, 6.0])


def test_backward_constant_loss_leaves_zero_grads():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape():
        loss = T.sum_(Tensor(np.array([3.0, 4.0])))
        T.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(ContractError):
            T.backward(x * 2.0)


def test_backward_twice_is_state_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = T.sum_(x * x)
        T.backward(loss)
        with pytest.raises(StateError):
            T.backward(loss)


def test_frozen_tape_rejects_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        T.backward(T.sum_(x))
        with pytest.raises(StateError):
            x * 2.0


def test_gradients_accumulate_through_fanout():
    (g,) = grad_of(lambda x: T.sum_(x * x + x), np.array([0.5, -1.0]))
    np.testing.assert_allclose(g, [2.0, -1.0])


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert y._tape is None and not y.requires_grad


# -- finite difference oracle -------------------------------------------------------------

def test_fd_quadratic_is_exact():
    theta = np.array([3.0])
    (g,), _ = T.finite_difference_gradient(lambda: theta[0] ** 2, [theta], step=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_flags_kink():
    theta = np.array([0.0])
    _, (mask,) = T.finite_difference_gradient(lambda: abs(theta[0]), [theta])
    assert not mask[0]


def test_fd_rejects_nonfinite():
    theta = np.array([1.0, 2.0])
    with pytest.raises(NumericError, match="index 1"):
        T.finite_difference_gradient(lambda: math.inf if theta[1] > 2.0 else 0.0, [theta])


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ParameterError):
        T.finite_difference_gradient(lambda: 0.0, [np.zeros(1)], step=0.0)


def test_fd_three_layer_affine_tanh_chain(rng):
    ws = [rng.standard_normal((4, 3)), rng.standard_normal((4, 4)), rng.standard_normal((2, 4))]
    bs = [rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(2)]
    x = rng.standard_normal((5, 3))

    def build(w1, b1, w2, b2, w3, b3):
        h = T.tanh(T.affine(x, w1, b1))
        h = T.tanh(T.affine(h, w2, b2))
        return T.sum_(T.affine(h, w3, b3))

    fd_check(build, ws[0], bs[0], ws[1], bs[1], ws[2], bs[2])


# -- every primitive against the oracle -------------------------------------------------------

A = np.array([[0.3, -1.2, 0.7], [1.5, 0.2, -0.4]])
B = np.array([[0.9, 0.1, -0.8], [-0.6, 1.1, 0.5]])
W = np.array([[0.2, -0.3, 0.5], [0.7, 0.1, -0.9], [-0.4, 0.6, 0.3], [0.8, -0.5, 0.2]])
PRIMITIVE_CASES = {
    "add": (lambda a, b: T.sum_((a + b) * (a + b)), (A, B)),
    "sub": (lambda a, b: T.sum_(T.exp(a - 2.0 * b)), (A, B)),
    "mul": (lambda a, b: T.sum_(a * b * a), (A, B)),
    "div": (lambda a, b: T.sum_(a / (b * b + 1.0)), (A, B)),
    "neg": (lambda a: T.sum_(-a * a * a), (A,)),
    "exp": (lambda a: T.sum_(T.exp(a)), (A,)),
    "sigmoid": (lambda a: T.sum_(T.sigmoid(a) * a), (A,)),
    "tanh": (lambda a: T.sum_(T.tanh(a) * a), (A,)),
    "silu": (lambda a: T.sum_(T.silu(a) * a), (A,)),
    "softplus": (lambda a: T.sum_(T.softplus(a) * a), (A,)),
    "matmul": (lambda a, w: T.sum_(T.tanh(T.matmul(a, T.transpose(w)))), (A, W)),
    "affine": (lambda a, w, b: T.sum_(T.tanh(T.affine(a, w, b))), (A, W, np.array([0.1, -0.2, 0.3, 0.0]))),
    "concat": (lambda a, b: T.sum_(T.tanh(T.concat([a, b * 2.0], axis=1)) * np.arange(6.0)), (A, B)),
    "stack": (lambda a, b: T.sum_(T.tanh(T.stack([a, b], axis=1)) * np.arange(3.0)), (A, B)),
    "getitem": (lambda a: T.sum_(T.tanh(a[:, 1:]) * a[:, :2]), (A,)),
    "reshape": (lambda a: T.sum_(T.tanh(T.reshape(a, (3, 2))) * np.arange(6.0).reshape(3, 2)), (A,)),
    "transpose": (lambda a: T.sum_(T.tanh(T.transpose(a)) * np.arange(6.0).reshape(3, 2)), (A,)),
    "broadcast_to": (lambda a: T.sum_(T.tanh(T.broadcast_to(T.reshape(a, (1, 2, 3)), (4, 2, 3))) *
                                      np.arange(24.0).reshape(4, 2, 3)), (A,)),
    "pad_left": (lambda a: T.sum_(T.tanh(T.pad_left(a, 2, axis=1)) * np.arange(10.0).reshape(2, 5)), (A,)),
    "sum_axis": (lambda a: T.sum_(T.tanh(T.sum_(a, axis=0))), (A,)),
    "mean_axis": (lambda a: T.sum_(T.tanh(T.mean(a, axis=1)) * np.array([1.0, -2.0])), (A,)),
    "abs": (lambda a: T.sum_(T.abs_(a) * a), (A,)),
    "scan": (lambda a, w: T.sum_(T.scan(lambda h, x: T.tanh(h * 0.5 + x), T.Tensor(np.zeros(2)),
                                        T.matmul(a, T.transpose(w)), axis=1)[0]), (A, W)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradient_matches_oracle(name):
    build, arrays = PRIMITIVE_CASES[name]
    fd_check(build, *arrays, tol=1e-6)


def test_dropout_gradient_uses_same_mask():
    x = np.linspace(-1, 1, 20)
    (g,) = grad_of(lambda t: T.sum_(T.dropout(t, 0.5, np.random.default_rng(4), True)), x)
    kept = T.dropout(Tensor(x), 0.5, np.random.default_rng(4), True).data != 0
    np.testing.assert_array_equal(g, np.where(kept, 2.0, 0.0))


# -- invariants -----------------------------------------------------------------------------

def test_scan_equals_explicit_loop_bitwise(rng):
    xs = rng.standard_normal((3, 7, 4))
    w = rng.standard_normal((4, 4))

    def step(h, x):
        return T.tanh(T.matmul(h, w) + x)

    stacked, last = T.scan(step, Tensor(np.zeros((3, 4))), Tensor(xs), axis=1)
    h = np.zeros((3, 4))
    for t in range(7):
        h = np.tanh(h @ w + xs[:, t])
        np.testing.assert_array_equal(stacked.data[:, t], h)
    np.testing.assert_array_equal(last.data, h)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-1e3, 1e3)))
def test_dropout_eval_is_identity(x):
    out = T.dropout(Tensor(x), 0.7, None, training=False)
    np.testing.assert_array_equal(out.data, x)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-1e6, 1e6)))
@settings(max_examples=50)
def test_shape_op_round_trips_are_bitwise(x):
    t = Tensor(x)
    np.testing.assert_array_equal(T.reshape(T.reshape(t, (-1,)), x.shape).data, x)
    np.testing.assert_array_equal(T.transpose(T.transpose(t, (2, 0, 1)), (1, 2, 0)).data, x)
    parts = [t[:, :1], t[:, 1:]]
    np.testing.assert_array_equal(T.concat(parts, axis=1).data, x)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 4)),
                  elements=st.floats(-2, 2)))
@settings(max_examples=25, deadline=None)
def test_elementwise_chain_gradient_property(x):
    fd_check(lambda a: T.sum_(T.silu(a) * T.tanh(a) + T.softplus(a)), x, tol=1e-5)


def test_backward_visits_each_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = x * x
        z = y + y
        loss = T.sum_(z)
        assert len(tape.nodes) == 3
        T.backward(loss)
        assert tape.nodes == [] and tape.frozen
    np.testing.assert_array_equal(x.grad, [8.0])
