import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixground import tensor as T
from pixground.tensor import Parameter, Tensor, backward, grad_check


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- matmul ----------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_zero_annihilates():
    out = T.matmul(Tensor(np.eye(2)), Tensor(np.zeros((2, 2))))
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_hand_value():
    out = T.matmul(t64([[1, 2], [3, 4]]), t64([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_rule():
    rng = np.random.default_rng(0)
    a, b = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    backward((T.matmul(a, b) * g).sum())
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# -- softmax ---------------------------------------------------------------------

def test_softmax_symmetric_row():
    assert np.allclose(T.softmax_rows(t64([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_ln2():
    out = T.softmax_rows(t64([[math.log(2), 0.0]])).data
    assert np.allclose(out, [[2 / 3, 1 / 3]], atol=1e-12)


def test_softmax_mask_single_survivor():
    out = T.softmax_rows(t64([[5.0, 1.0]]), mask=np.array([[False, True]])).data
    assert out.tolist() == [[1.0, 0.0]]


def test_softmax_fully_masked_row_raises():
    with pytest.raises(T.DegenerateMaskError):
        T.softmax_rows(t64([[1.0, 2.0]]), mask=np.array([[True, True]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=10, size=(rows, cols))
    mask = rng.random((rows, cols)) < 0.4
    mask[:, 0] = False
    out = T.softmax_rows(Tensor(x, dtype=np.float32), mask).data
    assert np.all(np.abs(out.sum(axis=-1) - 1) < 1e-6)
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(out[mask] == 0)


# -- elementwise -----------------------------------------------------------------

def test_relu_and_sigmoid_values():
    assert T.relu(t64([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert T.sigmoid(t64([0.0])).data.tolist() == [0.5]


def test_layer_norm_two_values():
    x = t64([[1.0, 3.0]])
    out = T.layer_norm(x, t64([1.0, 1.0]), t64([0.0, 0.0])).data
    expect = np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5)
    assert np.allclose(out, [expect], atol=1e-12)


def test_log_domain_error():
    with pytest.raises(T.DomainError):
        T.log(t64([1.0, 0.0]))


def test_broadcast_mismatch():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_nonfinite_raises():
    with pytest.raises(T.NonFiniteError):
        T.exp(t64([1000.0]))


def test_trailing_broadcast_gradient():
    x, b = t64(np.ones((2, 3))), t64([1.0, 2.0, 3.0])
    backward((x + b).sum())
    assert b.grad.tolist() == [2.0, 2.0, 2.0]


# -- backward ----------------------------------------------------------------------

def test_backward_sum_linear():
    x = t64([1.0, 2.0, 3.0])
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_square():
    x = t64([1.0, 2.0])
    backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_unreachable_is_zero():
    x, y = t64([1.0, 2.0]), t64([3.0])
    backward((y * 2).sum())
    assert x.grad.tolist() == [0.0, 0.0]


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(t64([1.0, 2.0]) * 2)


def test_frozen_parameter_gets_no_gradient():
    p = Parameter(np.array([1.0, 2.0]), name="p", dtype=np.float64)
    p.frozen = True
    backward((p * p).sum() + t64([1.0]).sum())
    assert p.grad.tolist() == [0.0, 0.0]


def test_tape_visits_each_op_once_in_order():
    x = t64([1.0, 2.0])
    y = x * x
    z = (y + y).sum()
    tape = T.Tape.from_output(z)
    assert tape.ops() == ["mul", "add", "sum"]
    seqs = [n.seq for n, _ in tape.entries]
    assert seqs == sorted(seqs)


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(4, 5))
    grads = []
    for _ in range(2):
        x = Tensor(data.astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)).astype(np.float32) if not grads else w_data)
        w_data = w.data
        backward(T.softmax_rows(x @ w).sum() + T.sigmoid(x).mean())
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_no_grad_records_nothing():
    x = t64([1.0])
    with T.no_grad():
        y = x * 2
    assert y._node is None and not y.requires_grad


# -- finite-difference oracle ------------------------------------------------------

def test_grad_check_linear_exact():
    x = t64(np.random.default_rng(0).normal(size=5))
    assert grad_check(lambda v: v.sum(), x) < 1e-10


def test_grad_check_softmax_sum_constant():
    x = t64(np.random.default_rng(1).normal(size=(3, 4)))
    assert grad_check(lambda v: T.softmax_rows(v).sum(), x) < 1e-8


PRIMITIVES = {
    "add": lambda x, y: (x + y * 0.5).sum(),
    "sub": lambda x, y: ((x - y) * x).sum(),
    "mul": lambda x, y: (x * y).sum(),
    "div": lambda x, y: (x / (T.abs_(y) + 1.0)).sum(),
    "scale": lambda x, y: T.scale(x * x, 0.3).sum(),
    "broadcast_add": lambda x, y: ((x + y[0]) * x).sum(),
    "relu": lambda x, y: (T.relu(x) * y).sum(),
    "sigmoid": lambda x, y: (T.sigmoid(x) * y).sum(),
    "log": lambda x, y: T.log(x * x + 1.0).sum(),
    "exp": lambda x, y: T.exp(x * 0.1).sum(),
    "mean": lambda x, y: (x * y).mean(axis=0).sum(),
    "sum_axis": lambda x, y: (x.sum(axis=1) * y[:, 0]).sum(),
    "layer_norm": lambda x, y: (T.layer_norm(x, y[0], y[1]) * x).sum(),
    "concat": lambda x, y: (T.concat([x, y], axis=1) * T.concat([y, x], axis=1)).sum(),
    "stack": lambda x, y: (T.stack([x, y]) * T.stack([y, x])).sum(),
    "matmul": lambda x, y: (x @ y.T).sum(),
    "softmax": lambda x, y: (T.softmax_rows(x) * y).sum(),
    "softmax_masked": lambda x, y: (T.softmax_rows(x, np.eye(x.shape[0], x.shape[1], 1) > 0) * y).sum(),
    "transpose": lambda x, y: (T.transpose(x, (1, 0)) @ y).sum(),
    "reshape": lambda x, y: (x.reshape(-1) * y.reshape(-1)).sum(),
    "getitem": lambda x, y: (x[1:, ::2] * y[1:, ::2]).sum(),
    "abs": lambda x, y: (T.abs_(x + 3.0) * y).sum(),
    "max_min": lambda x, y: (T.maximum(x, y) - T.minimum(x, y * 2)).sum(),
    "clamp_min": lambda x, y: (T.clamp_min(x, 0.05) * y).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x, y = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(3, 4)))
    f = PRIMITIVES[name]
    assert grad_check(lambda v: f(v[0], v[1]), [x, y]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_embedding_and_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    table = t64(rng.normal(size=(5, 3)))
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    assert grad_check(lambda v: (T.embedding(v, ids) * T.embedding(v, ids)).sum(), table) < 1e-4
    x = t64(rng.normal(size=(1, 5, 5, 2)))
    w = t64(rng.normal(size=(3, 3, 2, 3)))
    b = t64(rng.normal(size=3))
    probe = rng.normal(size=(1, 3, 3, 3))
    assert grad_check(lambda v: (T.conv2d(v[0], v[1], v[2], stride=2, padding=1) * probe).sum(),
                      [x, w, b]) < 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = T.conv2d(t64(x, False), t64(w, False), t64(b, False), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 3, 3, 4))
    for r in range(3):
        for c in range(3):
            patch = xp[:, 2 * r:2 * r + 3, 2 * c:2 * c + 3, :]
            ref[:, r, c] = np.einsum("bijc,ijco->bo", patch, w) + b
    assert np.allclose(out, ref)


def test_embedding_rejects_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(t64(np.zeros((3, 2))), [3])
