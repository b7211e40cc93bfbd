import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mignn import gradcore as gc
from mignn.errors import ContractError, DetachedInputError, EmptyInputError, ShapeError, ValidationError
from mignn.gradcore import SparseMatrix, Tape, Tensor, backward, fd_check, hessian_vector_check, numeric_grad
from mignn.harness.selftest import PRIMITIVE_TOL, _primitive_builders


# --- forward values ---------------------------------------------------------

def test_matmul_examples():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(gc.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    np.testing.assert_array_equal(gc.matmul(Tensor(b), Tensor([[0.0], [1.0]])).data, [[2.0], [4.0]])
    out = gc.matmul(Tensor(np.zeros((3, 2))), Tensor(np.random.default_rng(0).normal(size=(2, 5))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 5)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        gc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_spmm_examples():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(4, 3))
    empty = SparseMatrix.from_entries(4, 4, [])
    np.testing.assert_array_equal(gc.spmm(empty, Tensor(d)).data, np.zeros((4, 3)))
    eye = SparseMatrix.from_entries(4, 4, [(i, i, 1.0) for i in range(4)])
    np.testing.assert_array_equal(gc.spmm(eye, Tensor(d)).data, d)
    cells = rng.choice(16, size=6, replace=False)
    s = SparseMatrix.from_entries(4, 4, [(int(c) // 4, int(c) % 4, float(rng.normal())) for c in cells])
    assert s.nnz == 6
    np.testing.assert_array_equal(gc.spmm(s, Tensor(d)).data, gc.matmul(Tensor(s.dense()), Tensor(d)).data)


def test_spmm_shape_error():
    with pytest.raises(ShapeError):
        gc.spmm(SparseMatrix.from_entries(2, 3, []), Tensor(np.ones((2, 2))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_spmm_bit_identical_to_dense_matmul(m, k, n, seed):
    rng = np.random.default_rng(seed)
    dense = rng.normal(size=(m, k)) * (rng.random((m, k)) < 0.4)
    d = rng.normal(size=(k, n))
    s = SparseMatrix.from_dense(dense)
    assert np.array_equal(gc.spmm(s, Tensor(d)).data, gc.matmul(Tensor(s.dense()), Tensor(d)).data)


def test_sparse_matrix_rejects_unsorted_and_duplicates():
    with pytest.raises(ValidationError):
        SparseMatrix(2, 2, [1, 0], [0, 0], [1.0, 1.0])
    with pytest.raises(ValidationError):
        SparseMatrix(2, 2, [0, 0], [1, 1], [1.0, 1.0])
    with pytest.raises(ValidationError):
        SparseMatrix(2, 2, [0], [2], [1.0])


def test_elementwise_examples():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(gc.hadamard(Tensor(a), Tensor(np.ones((2, 3)))).data, a)
    assert gc.sigmoid(Tensor(0.0)).item() == 0.5
    assert gc.leaky_relu(Tensor(-2.0), 0.01).item() == pytest.approx(-0.02, abs=1e-15)
    with pytest.raises(ShapeError):
        gc.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_leaky_relu_derivative_at_zero_is_one():
    with Tape() as tape:
        x = tape.watch(np.zeros(3))
        (g,) = backward(gc.reduce_sum(gc.leaky_relu(x, 0.01)), [x])
    np.testing.assert_array_equal(g.data, np.ones(3))


def test_sigmoid_is_stable_for_large_inputs():
    out = gc.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_softmax_cross_entropy_examples():
    assert gc.softmax_cross_entropy_rows(Tensor(np.zeros((1, 7))), np.eye(7)[[0]]).item() == pytest.approx(
        math.log(7), abs=1e-12)
    val = gc.softmax_cross_entropy_rows(Tensor([[10.0, -10.0]]), np.array([[1.0, 0.0]])).item()
    assert val == pytest.approx(2.06e-9, rel=1e-2)
    rng = np.random.default_rng(2)
    z = rng.normal(size=(2, 4))
    t = np.eye(4)[[1, 3]]
    both = gc.softmax_cross_entropy_rows(Tensor(z), t).item()
    parts = sum(gc.softmax_cross_entropy_rows(Tensor(z[[i]]), t[[i]]).item() for i in range(2))
    assert both == pytest.approx(parts, abs=1e-14)


def test_softmax_cross_entropy_empty():
    with pytest.raises(EmptyInputError):
        gc.softmax_cross_entropy_rows(Tensor(np.zeros((0, 3))), np.zeros((0, 3)))
    with pytest.raises(EmptyInputError):
        gc.softmax_cross_entropy_rows(Tensor(np.zeros((2, 0))), np.zeros((2, 0)))


def test_sigmoid_bce_examples():
    assert gc.sigmoid_bce(Tensor([0.0]), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert gc.sigmoid_bce(Tensor([0.0]), np.array([0.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    # closed form 2 * softplus(-3) = 0.0971747...
    expected = 2 * math.log1p(math.exp(-3.0))
    assert gc.sigmoid_bce(Tensor([3.0, -3.0]), np.array([1.0, 0.0])).item() == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValidationError):
        gc.sigmoid_bce(Tensor([0.0]), np.array([0.5]))


def test_l2_norm_examples_and_origin_gradient():
    assert gc.l2_norm(Tensor([3.0, 4.0])).item() == 5.0
    assert gc.l2_norm(Tensor(np.zeros(4))).item() == 0.0
    assert gc.l2_norm(Tensor(np.ones(4))).item() == 2.0
    with Tape() as tape:
        v = tape.watch(np.zeros(4))
        (g,) = backward(gc.l2_norm(v), [v])
    np.testing.assert_array_equal(g.data, np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, c, seed):
    z = np.random.default_rng(seed).normal(size=(n, c)) * 30
    rows = gc.softmax_rows(Tensor(z)).data.sum(axis=1)
    assert np.all(np.abs(rows - 1.0) <= 1e-12)


# --- backward ---------------------------------------------------------------

def test_backward_examples():
    x0 = np.random.default_rng(3).normal(size=(2, 3))
    with Tape() as tape:
        x = tape.watch(x0)
        (g,) = backward(gc.reduce_sum(x), [x])
    np.testing.assert_array_equal(g.data, np.ones((2, 3)))

    with Tape() as tape:
        x = tape.watch(3.0)
        (g,) = backward(x * x, [x], create_graph=True)
        (gg,) = backward(g, [x])
    assert g.item() == 6.0
    assert gg.item() == 2.0


def test_backward_contract_errors():
    with Tape() as tape:
        x = tape.watch(np.ones(3))
        with pytest.raises(ContractError):
            backward(gc.scale(x, 2.0), [x])
        with pytest.raises(DetachedInputError):
            backward(gc.reduce_sum(x), [Tensor(np.ones(3))])
    with Tape() as other:
        y = other.watch(np.ones(3))
    with Tape() as tape:
        x = tape.watch(np.ones(3))
        with pytest.raises(DetachedInputError):
            backward(gc.reduce_sum(x), [y])


def test_unreachable_input_gets_zero_gradient():
    with Tape() as tape:
        x = tape.watch(np.ones(2))
        y = tape.watch(np.ones(3))
        gx, gy = backward(gc.reduce_sum(x), [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros(3))


def test_first_order_gradients_are_not_recorded():
    with Tape() as tape:
        x = tape.watch(2.0)
        (g,) = backward(x * x, [x])
    assert g.node is None


@pytest.mark.parametrize("name", sorted(_primitive_builders()))
def test_primitive_gradients_match_finite_differences(name):
    build = _primitive_builders()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(fd_check(*build(rng)) for _ in range(100))
    assert worst <= PRIMITIVE_TOL


def test_fd_check_examples():
    assert fd_check(gc.l2_norm, np.array([3.0, 4.0])) <= 1e-6
    rng = np.random.default_rng(4)
    t = np.eye(4)[rng.integers(0, 4, size=3)]
    assert fd_check(lambda z: gc.softmax_cross_entropy_rows(z, t), rng.normal(size=(3, 4))) <= 1e-5
    assert fd_check(lambda z: Tensor(7.0), rng.normal(size=3)) == 0.0


def test_second_order_matches_finite_differences_of_gradient():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(4, 2))
    t = np.eye(2)[rng.integers(0, 2, size=3)]
    f = lambda x: gc.softmax_cross_entropy_rows(gc.matmul(gc.tanh(x), Tensor(w)), t)
    for _ in range(10):
        x = rng.normal(size=(3, 4))
        assert hessian_vector_check(f, x, rng.normal(size=x.shape)) <= 1e-4


def test_numeric_grad_of_quadratic():
    np.testing.assert_allclose(numeric_grad(lambda x: gc.reduce_sum(gc.hadamard(x, x)), np.array([1.0, -2.0])),
                               [2.0, -4.0], rtol=1e-8)


def test_tape_parents_precede_children_and_replay_is_bit_exact():
    rng = np.random.default_rng(6)
    x0, w0 = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    t = np.eye(2)[[0, 1, 1, 0]]
    with Tape() as tape:
        x, w = tape.watch(x0), tape.watch(w0)
        loss = gc.softmax_cross_entropy_rows(gc.leaky_relu(gc.matmul(x, w), 0.01), t)
        grads = backward(loss, [x, w], create_graph=True)
    for node in tape.nodes:
        assert all(p.node.index < node.index for p in node.parents if p.node is not None and p.node.tape is tape)
    replayed = tape.replay()
    assert all(np.array_equal(r, n.value) for r, n in zip(replayed, tape.nodes))

    with Tape() as tape2:
        x, w = tape2.watch(x0), tape2.watch(w0)
        loss2 = gc.softmax_cross_entropy_rows(gc.leaky_relu(gc.matmul(x, w), 0.01), t)
        grads2 = backward(loss2, [x, w], create_graph=True)
    assert loss.data.tobytes() == loss2.data.tobytes()
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(grads, grads2))


def test_paused_tape_records_nothing():
    with Tape() as tape:
        x = tape.watch(np.ones(2))
        n = len(tape.nodes)
        with tape.paused():
            y = gc.scale(x, 2.0)
        assert len(tape.nodes) == n
        assert y.node is None


def test_take_and_put_are_adjoint():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 2))
    idx = np.array([4, 0, 4, 1])
    g = rng.normal(size=(4, 2))
    lhs = (gc.take(Tensor(a), idx).data * g).sum()
    rhs = (a * gc.put(Tensor(g), idx, (5, 2)).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-13)
