import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from mmvdiff import tensor as T
from mmvdiff.errors import ContractError, NumericDomainError, ShapeError
from mmvdiff.gradcheck import check_gradients
from mmvdiff.tensor import Parameter, Tape, Tensor, backward

GRAD_SEEDS = range(10)


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_gradcheck_every_op(name):
    for seed in GRAD_SEEDS:
        fn, inputs = gradcases.build(name, seed)
        res = check_gradients(fn, inputs, h=1e-5, rtol=1e-4)
        assert res.ok, f"{name} seed {seed}: rel {res.max_rel_error:.2e} abs {res.max_abs_error:.2e}"


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal((a @ Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(T.zeros((2, 3)), T.ones((3, 4))).data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_elementwise_examples():
    np.testing.assert_array_equal(T.exp(T.zeros((2, 2))).data, np.ones((2, 2)))
    assert T.mean(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5
    np.testing.assert_array_equal(T.sum_(T.ones((2, 3)), axis=-1).data, [3, 3])
    assert T.sum_(T.ones((2, 3)), axis=-1, keepdims=True).shape == (2, 1)


@pytest.mark.parametrize("bad", [
    lambda: T.sqrt(Tensor([1.0, -1.0])),
    lambda: T.div(Tensor([1.0]), Tensor([0.0])),
    lambda: T.rdiv(Tensor([0.0]), 1.0),
    lambda: T.log(Tensor([0.0])),
])
def test_domain_violations_raise(bad):
    with pytest.raises(NumericDomainError):
        bad()


def test_broadcast_only_over_leading_axes():
    T.add(T.ones((2, 3)), T.ones(3))
    with pytest.raises(ShapeError):
        T.add(T.ones((2, 3)), T.ones((2, 1)))


def test_reshape_round_trip_and_errors():
    x = T.arange(6)
    y = x.reshape(2, 3).reshape(3, 2).reshape(6)
    np.testing.assert_array_equal(y.data, np.arange(6))
    with pytest.raises(ShapeError):
        x.reshape(4, 2)
    with pytest.raises(ShapeError):
        T.permute(T.zeros((2, 3)), (0, 0))


def test_transpose_law():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = x.permute(1, 0)
    for i in range(2):
        for j in range(3):
            assert y.data[j, i] == x.data[i, j]


def test_view_sequence_slot_index():
    # V=2, K=3, H=W=2, C=1: (v, k, h, w) lands at slot k*4 + h*2 + w of view v
    grid = np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2, 1)
    seq = Tensor(grid).reshape(2, 3 * 2 * 2, 1).data
    for v in range(2):
        for k in range(3):
            for h in range(2):
                for w in range(2):
                    assert seq[v, k * 4 + h * 2 + w, 0] == grid[v, k, h, w, 0]


@given(st.lists(st.integers(1, 3), min_size=1, max_size=4), st.randoms(use_true_random=False))
@settings(max_examples=50, deadline=None)
def test_permute_inverse_is_identity(shape, rnd):
    axes = list(range(len(shape)))
    rnd.shuffle(axes)
    x = Tensor(np.random.default_rng(0).standard_normal(shape))
    back = x.permute(axes).permute(tuple(np.argsort(axes)))
    np.testing.assert_array_equal(back.data, x.data)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))
    np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)], dtype=np.float64)).data, [0.25, 0.75],
                               atol=1e-12)
    x = Tensor(np.random.default_rng(1).standard_normal((3, 5)), dtype=np.float64)
    np.testing.assert_allclose(T.softmax(x).data, T.softmax(x + 100.0).data, atol=1e-12)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = Tensor(np.array([row], dtype=np.float64))
    p = T.softmax(x).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(T.softmax(x + shift).data, p, atol=1e-12)


def test_backward_examples():
    x = Parameter(np.array([3.0]))
    with Tape() as tape:
        loss = T.sum_(x * x)
    assert tape.gradient(loss, [x])[0][0] == 6.0

    y = Parameter(np.array([1.0, 2.0]))
    with Tape():
        loss = T.sum_(x * 2.0)
        gx, gy = backward(loss, [x, y])
    assert gx[0] == 2.0
    np.testing.assert_array_equal(gy, [0.0, 0.0])


def test_backward_rejects_non_scalar_loss():
    x = Parameter(np.ones(3))
    with Tape() as tape:
        out = x * 2.0
    with pytest.raises(ContractError):
        tape.gradient(out, [x])


def test_no_tape_means_no_recording():
    x = Parameter(np.ones(3))
    y = x * 2.0
    assert y.node is None


def test_tape_order_is_topological_and_each_node_visited_once():
    x = Parameter(np.array([2.0]))
    calls = []
    with Tape() as tape:
        a = x * 3.0
        b = a + a  # a feeds b twice
        for node in tape.nodes:
            assert all(p.node is None or tape.nodes.index(p.node) < tape.nodes.index(node)
                       for p in node.parents)
        original = [n.backward for n in tape.nodes]
        for n, fn in zip(tape.nodes, original):
            n.backward = (lambda f, op: (lambda g: (calls.append(op), f(g))[1]))(fn, n.op)
        g = tape.gradient(T.sum_(b), [x])[0]
    assert g[0] == 6.0
    assert sorted(calls) == sorted(["mul", "add"])


def test_float32_default_and_float64_selectable():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor([1.0], dtype=np.float64).dtype == np.float64
    x = Tensor(np.ones(3, dtype=np.float32))
    assert T.gelu(x * 0.5 + 1.0).dtype == np.float32
