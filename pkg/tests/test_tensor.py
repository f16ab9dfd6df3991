import math

import numpy as np
import pytest

from hlnet import tensor as T
from hlnet.exceptions import ContractError, NonFiniteError, ShapeError
from hlnet.tensor import GradientTape, Parameter, Tensor


def test_matmul_examples():
    x = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(T.matmul(np.eye(3), x).data, x)
    out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4])
    np.testing.assert_allclose(T.softmax_rows(np.array([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)
    out = T.softmax_rows(np.array([[1000.0, 1000.0]])).data
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = T.softmax_rows(rng.normal(scale=30, size=(50, 17))).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_mask_gives_exact_zeros():
    x = np.array([[1.0, 2.0, 3.0]])
    out = T.softmax_rows(x, mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())


def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_allclose(T.layer_norm(np.full((2, 3), 7.0), one, zero).data, 0.0)
    out = T.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)
    shift = np.array([0.5, -1.0, 2.0])
    out = T.layer_norm(np.random.default_rng(1).normal(size=(4, 3)), zero, shift).data
    np.testing.assert_array_equal(out, np.broadcast_to(shift, (4, 3)))


def test_elementwise_examples():
    np.testing.assert_array_equal(T.elementwise("relu", np.array([-2.0, 2.0])).data, [0.0, 2.0])
    assert T.elementwise("concat_last_axis", np.ones(4), np.ones(5)).shape == (9,)
    assert T.elementwise("scale", np.ones(2), c=3.0).data.tolist() == [3.0, 3.0]
    with pytest.raises(ShapeError):
        T.elementwise("add", np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        T.concat([np.ones((2, 3)), np.ones((3, 3))], axis=-1)


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.mul(np.array([np.inf]), np.array([0.0]))


def test_backward_linear_sum():
    # loss = sum(W x) => dW[r, c] = x[c] for every row r
    w = Parameter(np.random.default_rng(0).normal(size=(3, 4)), "w")
    x = np.array([1.0, -2.0, 0.5, 3.0])
    with GradientTape() as tape:
        loss = T.sum(T.matmul(w, x.reshape(4, 1)))
    g = T.backward(loss, tape, [w])[w]
    np.testing.assert_array_equal(g, np.tile(x, (3, 1)))


def test_backward_unused_parameter_is_zero():
    used, unused = Parameter(np.ones(3), "a"), Parameter(np.ones(2), "b")
    with GradientTape() as tape:
        loss = T.sum(T.mul(used, used))
    grads = T.backward(loss, tape, [used, unused])
    np.testing.assert_array_equal(grads[unused], 0.0)


def test_backward_squared_norm():
    x = Parameter(np.array([1.0, -2.0, 3.0]), "x")
    with GradientTape() as tape:
        loss = T.sum(T.mul(x, x))
    np.testing.assert_array_equal(T.backward(loss, tape, [x])[x], 2 * x.data)


def test_backward_requires_scalar():
    x = Parameter(np.ones(3), "x")
    with GradientTape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        T.backward(y, tape, [x])


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    w = Parameter(rng.normal(size=(5, 5)), "w")
    x = rng.normal(size=(7, 5))

    def run():
        with GradientTape() as tape:
            h = T.softmax_rows(T.linear(x, w))
            loss = T.sum(T.mul(h, h))
        return T.backward(loss, tape, [w])[w]

    assert run().tobytes() == run().tobytes()


def test_no_recording_outside_tape():
    w = Parameter(np.ones(2), "w")
    with GradientTape() as tape:
        with T.no_tape():
            T.mul(w, w)
    assert tape.nodes == []


def test_grad_check_quadratic():
    theta = Parameter(np.random.default_rng(0).normal(size=100), "theta")
    err = T.grad_check(lambda: T.sum(T.mul(theta, theta)), [theta], eps=1e-5)
    assert err <= 1e-8


def test_grad_check_linear():
    theta = Parameter(np.random.default_rng(1).normal(size=80), "theta")
    c = np.random.default_rng(2).normal(size=80)
    err = T.grad_check(lambda: T.sum(T.mul(theta, c)), [theta], eps=1e-5)
    assert err <= 1e-10


# per-op gradient checks in float64 at eps = 1e-5
OP_CASES = {
    "linear": lambda p, x: T.linear(x, p[0], p[1]),
    "relu": lambda p, x: T.relu(T.linear(x, p[0], p[1])),
    "sigmoid": lambda p, x: T.sigmoid(T.linear(x, p[0], p[1])),
    "softmax": lambda p, x: T.softmax_rows(T.linear(x, p[0], p[1])),
    "masked_softmax": lambda p, x: T.softmax_rows(
        T.linear(x, p[0], p[1]), mask=np.tril(np.ones((6, 4), bool), 1)
    ),
    "layer_norm": lambda p, x: T.layer_norm(T.linear(x, p[0], p[1]), p[2], p[3]),
    "take": lambda p, x: T.take(T.linear(x, p[0], p[1]), np.array([[0, 2], [2, 5], [1, 1]])),
    "take_axis1": lambda p, x: T.take(T.linear(x, p[0], p[1]), np.array([3, 0, 0]), axis=1),
    "batched_matmul": lambda p, x: T.matmul(
        T.reshape(T.linear(x, p[0], p[1]), (2, 3, 4)),
        T.transpose(T.reshape(T.linear(x, p[0], p[1]), (2, 3, 4)), (0, 2, 1)),
    ),
    "concat": lambda p, x: T.concat([T.linear(x, p[0], p[1]), T.mul(x, x)], axis=-1),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    rng = np.random.default_rng(7)
    params = [
        Parameter(rng.normal(size=(4, 5)), "w"),
        Parameter(rng.normal(size=4), "b"),
        Parameter(rng.normal(size=4), "g"),
        Parameter(rng.normal(size=4), "s"),
    ]
    x = rng.normal(size=(6, 5))
    probe = rng.normal(size=OP_CASES[name](params, x).shape)
    f = lambda: T.sum(T.mul(OP_CASES[name](params, x), probe))  # noqa: E731
    used = params if name == "layer_norm" else params[:2]
    assert T.grad_check(f, used, eps=1e-5) <= 1e-4


def test_loss_gradients():
    rng = np.random.default_rng(11)
    logits = Parameter(rng.normal(size=(5, 4)), "logits")
    ce = T.grad_check(lambda: T.cross_entropy(logits, [0, 3, 1, 1, 2]), [logits])
    y = (rng.random((5, 4)) < 0.3).astype(float)
    bce = T.grad_check(lambda: T.bce_with_logits(logits, y), [logits])
    assert ce <= 1e-4 and bce <= 1e-4


def test_cross_entropy_values():
    assert T.cross_entropy(np.zeros((3, 4)), [0, 1, 2]).item() == pytest.approx(math.log(4))
    assert T.cross_entropy(np.array([[1.0, 0.0]]), [0]).item() == pytest.approx(
        -math.log(math.e / (math.e + 1)), abs=1e-12
    )
    assert T.cross_entropy(np.array([[60.0, 0.0, 0.0]]), [0]).item() < 1e-20
    with pytest.raises(IndexError):
        T.cross_entropy(np.zeros((1, 3)), [3])


def test_bce_values():
    assert T.bce_with_logits(np.zeros((4, 3)), np.ones((4, 3))).item() == pytest.approx(math.log(2))
    assert T.bce_with_logits(np.array([[1.0]]), np.array([[1.0]])).item() == pytest.approx(
        -math.log(1 / (1 + math.exp(-1))), abs=1e-12
    )
    perfect = T.bce_with_logits(np.array([[800.0, -800.0]]), np.array([[1.0, 0.0]]))
    assert perfect.item() == 0.0


def test_tensor_shape_contract():
    t = Tensor(np.zeros((2, 3)))
    assert t.shape == (2, 3) and t.data.size == 6
    with pytest.raises(ShapeError):
        T.reshape(t, (4, 2))
