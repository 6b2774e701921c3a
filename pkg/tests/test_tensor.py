import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2dc import tensor as T
from s2dc.gradcheck import check_gradients, finite_difference_gradient, max_relative_error


def test_matmul_identity():
    eye = T.Tensor(np.eye(2))
    out = T.matmul(eye, eye)
    assert np.array_equal(out.data, np.eye(2))


def test_matmul_hand_value():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[1.0], [1.0]])
    assert np.array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_zero_annihilates():
    z = T.Tensor(np.zeros((3, 3)))
    a = T.Tensor(np.arange(9.0).reshape(3, 3))
    assert np.array_equal(T.matmul(z, a).data, np.zeros((3, 3)))


def test_matmul_shape_error_names_shapes():
    a = T.Tensor(np.zeros((2, 3)))
    b = T.Tensor(np.zeros((2, 3)))
    with pytest.raises(T.ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(a, b)


def test_matmul_associativity():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, b, c = (T.Tensor(rng.normal(size=(4, 4))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        assert np.max(np.abs(left - right)) < 1e-10


def test_softmax_uniform_and_shift():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, 0.25, atol=1e-15)
    base = T.softmax(T.Tensor([3.7, 3.7])).data
    assert np.allclose(base, 0.5, atol=1e-15)


def test_softmax_formula_value():
    out = T.softmax(T.Tensor([np.log(1.0), np.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


@given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=1, max_size=12))
def test_softmax_sums_to_one_large_magnitudes(values):
    out = T.softmax(T.Tensor(values)).data
    assert np.all(out >= 0.0)
    assert abs(out.sum() - 1.0) < 1e-12


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_axis_rows_sum_to_one(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=100.0, size=(n, n + 1))
    out = T.softmax(T.Tensor(x), axis=1).data
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_backward_sum_is_ones():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with T.GradTape() as tape:
        loss = x.sum()
    grads = tape.backward(loss)
    assert np.array_equal(grads[x].data, np.ones((2, 3)))


def test_backward_square_power_rule():
    x = T.Tensor(3.0, requires_grad=True)
    with T.GradTape() as tape:
        loss = x * x
    grads = tape.backward(loss)
    assert grads[x].data == pytest.approx(6.0)


def test_backward_unused_leaf_zero_grad():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.Tensor([5.0], requires_grad=True)
    with T.GradTape() as tape:
        tape.watch(y)
        loss = (x * x).sum()
    grads = tape.backward(loss)
    assert np.array_equal(grads[y].data, [0.0])


def test_backward_rejects_non_scalar_and_detached():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.GradTape() as tape:
        y = x * 2.0
    with pytest.raises(T.TapeError, match="scalar"):
        tape.backward(y)
    loose = T.Tensor(1.0)
    with pytest.raises(T.TapeError, match="detached"):
        T.backward(loose)


def test_tape_append_only_after_backward():
    x = T.Tensor(2.0, requires_grad=True)
    with T.GradTape() as tape:
        loss = x * x
    tape.backward(loss)
    with pytest.raises(T.TapeError, match="closed"):
        with tape:
            pass


def test_ops_outside_tape_are_constants():
    x = T.Tensor([1.0], requires_grad=True)
    y = x * 3.0
    assert y.tape is None


def test_assign_rejected_inside_tape():
    x = T.Tensor([1.0], requires_grad=True)
    with T.GradTape():
        with pytest.raises(T.TapeError):
            x.assign_([2.0])


def test_nan_input_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        T.Tensor([np.nan])


def test_log_clamps_small_arguments():
    out = T.log(T.Tensor([0.0, 1e-300, 1.0]))
    assert out.data[0] == pytest.approx(np.log(1e-12))
    assert out.data[1] == pytest.approx(np.log(1e-12))
    assert out.data[2] == 0.0


def _random_leaf(rng, shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "div", "matmul", "exp", "log", "sqrt", "tanh",
    "power", "sum0", "mean1", "max1", "softmax1", "logsumexp1", "take",
    "concat", "transpose", "reshape",
])
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        a = _random_leaf(rng, (3, 4))
        b = _random_leaf(rng, (3, 4))
        m = _random_leaf(rng, (4, 2))
        pos = T.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        builders = {
            "add": (lambda: (a + b).sum(), [a, b]),
            "sub": (lambda: (a - b).sum(), [a, b]),
            "mul": (lambda: (a * b).sum(), [a, b]),
            "div": (lambda: (a / pos).sum(), [a, pos]),
            "matmul": (lambda: (a @ m).sum(), [a, m]),
            "exp": (lambda: T.exp(a).sum(), [a]),
            "log": (lambda: T.log(pos).sum(), [pos]),
            "sqrt": (lambda: T.sqrt(pos).sum(), [pos]),
            "tanh": (lambda: T.tanh(a).sum(), [a]),
            "power": (lambda: (pos ** 3.0).sum(), [pos]),
            "sum0": (lambda: (a.sum(axis=0) * b[0]).sum(), [a, b]),
            "mean1": (lambda: (a.mean(axis=1) ** 2.0).sum(), [a]),
            "max1": (lambda: a.max(axis=1).sum(), [a]),
            "softmax1": (lambda: (T.softmax(a, axis=1) * b).sum(), [a, b]),
            "logsumexp1": (lambda: T.logsumexp(a, axis=1).sum(), [a]),
            "take": (lambda: (a[1] * b[2]).sum(), [a, b]),
            "concat": (lambda: (T.concatenate([a, b], axis=0) ** 2.0).sum(), [a, b]),
            "transpose": (lambda: (a.T @ b).sum(), [a, b]),
            "reshape": (lambda: (a.reshape(4, 3) ** 2.0).sum(), [a]),
        }
        build, leaves = builders[name]
        assert check_gradients(build, leaves) < 1e-4


def test_composite_loss_gradient_matches_fd():
    rng = np.random.default_rng(7)
    x = _random_leaf(rng, (5, 3))
    w = _random_leaf(rng, (3, 3))

    def build():
        h = T.tanh(x @ w)
        p = T.softmax(h, axis=1)
        return -(T.log(p) * p.detach()).sum() / 5.0

    assert check_gradients(build, [x, w]) < 1e-4


def test_diamond_dependency_accumulates():
    x = T.Tensor(2.0, requires_grad=True)
    with T.GradTape() as tape:
        y = x * x
        loss = y + y
    grads = tape.backward(loss)
    assert grads[x].data == pytest.approx(8.0)


def test_finite_difference_helper_on_quadratic():
    buf = np.array([1.0, -2.0, 0.5])
    grad = finite_difference_gradient(lambda: float((buf ** 2).sum()), buf)
    assert max_relative_error(2 * buf, grad) < 1e-8
