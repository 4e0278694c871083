import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pdeformer import mathcore as mc
from pdeformer.mathcore import DiffGraph, NumericalError, ShapeError, Tensor, backward, gradcheck


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s = s + a[i, t] * b[t, j]
            out[i, j] = s
    return out


# ------------------------------------------------------------------ tensors


def test_tensor_rejects_non_finite_and_empty():
    with pytest.raises(NumericalError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericalError):
        Tensor([float("inf")])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_tensor_data_is_read_only_copy():
    src = np.array([1.0, 2.0])
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 3.0
    assert t.numpy().flags.writeable


# ------------------------------------------------------------------- matmul


def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(mc.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert np.array_equal(mc.matmul(m, Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        mc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_3x4_4x2_matches_loop_oracle_exactly():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert np.array_equal(mc.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b))


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_matmul_bit_identical_to_loop_oracle_up_to_8(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    assert np.array_equal(mc.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b))


def test_matmul_batched_forms():
    rng = np.random.default_rng(1)
    a, w, s = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal((2, 4, 3))
    assert np.allclose(mc.matmul(Tensor(a), Tensor(w)).data, a @ w)
    assert np.allclose(mc.matmul(Tensor(a), Tensor(s)).data, a @ s)
    with pytest.raises(ShapeError):
        mc.matmul(Tensor(a), Tensor(rng.standard_normal((3, 4, 3))))


# ------------------------------------------------------------------ softmax


def test_softmax_examples():
    assert np.allclose(mc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    assert np.allclose(mc.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)
    assert np.array_equal(mc.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = mc.softmax(Tensor(x)).data
    assert np.abs(s.sum(axis=-1) - 1).max() <= 1e-12
    assert (s >= 0).all()
    assert np.abs(mc.softmax(Tensor(x + c)).data - s).max() <= 1e-12


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        mc.softmax(Tensor(np.ones((2, 2))), axis=2)


# --------------------------------------------------------------------- relu


def test_relu_examples():
    assert np.array_equal(mc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert not mc.relu(Tensor(-np.arange(1.0, 5.0))).data.any()


@given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
def test_relu_idempotent(x):
    r = mc.relu(Tensor(x))
    assert np.array_equal(mc.relu(r).data, r.data)


# --------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(mc.layer_norm(Tensor([[1.0, 1.0, 1.0, 1.0]]), one, zero).data, np.zeros((1, 4)))
    out = mc.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    # variance 1, so each entry is +-1 / sqrt(1 + 1e-5)
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    assert out[0, 0] == pytest.approx(expected, abs=1e-15)
    assert out[0, 0] == pytest.approx(0.999995, abs=1e-6)
    assert out[0, 1] == -out[0, 0]
    bias = Tensor([0.5, -2.0, 3.0])
    g0 = mc.layer_norm(Tensor([[1.0, 5.0, -2.0], [0.0, 1.0, 2.0]]), Tensor(np.zeros(3)), bias)
    assert np.array_equal(g0.data, np.tile(bias.data, (2, 1)))


def test_layer_norm_rejects_width_one():
    with pytest.raises(ShapeError):
        mc.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


# ------------------------------------------------------------ cross entropy


def test_cross_entropy_examples():
    assert mc.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert mc.cross_entropy(Tensor([[30.0, -30.0]]), [0]).item() == pytest.approx(0.0, abs=1e-25)
    a = mc.cross_entropy(Tensor([[2.0, -1.0]]), [0]).item()
    b = mc.cross_entropy(Tensor([[-1.0, 2.0]]), [0]).item()
    both = mc.cross_entropy(Tensor([[2.0, -1.0], [-1.0, 2.0]]), [0, 0]).item()
    assert both == pytest.approx((a + b) / 2, rel=1e-15)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        mc.cross_entropy(Tensor([[0.0, 0.0]]), [2])
    with pytest.raises(ValueError):
        mc.cross_entropy(Tensor([[0.0, 0.0]]), [-1])


# ----------------------------------------------------------------- backward


def test_backward_product_rule():
    g = DiffGraph()
    with g:
        x = g.leaf(np.array([3.0]), "x")
        y = g.leaf(np.array([4.0]), "y")
        z = mc.sum_(mc.mul(x, y))
    grads = backward(g, z)
    assert grads.of(x)[0] == 4.0
    assert grads.of(y)[0] == 3.0
    assert np.array_equal(grads[z.node], np.ones(()))


def test_backward_of_softmax_sum_is_zero():
    g = DiffGraph()
    with g:
        x = g.leaf(np.array([0.3, -1.2, 2.0]))
        z = mc.sum_(mc.softmax(x))
    assert np.abs(backward(g, z).of(x)).max() < 1e-15


def test_backward_rejects_non_scalar_root():
    g = DiffGraph()
    with g:
        x = g.leaf(np.ones(3))
        y = mc.scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(g, y)


def test_tape_is_topological():
    g = DiffGraph()
    with g:
        x = g.leaf(np.ones((2, 2)))
        mc.sum_(mc.relu(mc.matmul(x, x)))
    for i, node in enumerate(g.nodes):
        assert all(src is None or src < i for src in node.inputs)


def test_fan_out_accumulates_both_branches():
    x0 = np.array([0.7, -0.4, 1.3])

    def f(x):
        a = mc.exp(x)
        return mc.sum_(mc.add(mc.mul(a, a), mc.scale(a, 3.0)))

    assert gradcheck(f, [x0])[0] < 1e-8
    g = DiffGraph()
    with g:
        x = g.leaf(x0)
        root = f(x)
    expected = 2 * np.exp(2 * x0) + 3 * np.exp(x0)
    assert np.allclose(backward(g, root).of(x), expected, rtol=1e-12)


def test_untracked_ops_record_nothing():
    g = DiffGraph()
    with g:
        mc.add(Tensor([1.0]), Tensor([2.0]))
    assert len(g) == 0


def test_non_finite_reports_op_and_node():
    g = DiffGraph()
    with g:
        x = g.leaf(np.array([800.0]))
        with pytest.raises(NumericalError) as info:
            mc.exp(x)
    assert info.value.op == "exp"
    assert info.value.node == 1


# ------------------------------------------------------------- grad checks

RNG = np.random.default_rng(42)


def _w(*shape):
    return RNG.standard_normal(shape)


PRIMITIVES = {
    "add": (lambda a, b: mc.sum_(mc.mul(mc.add(a, b), mc.add(a, b))), [(3, 2), (3, 2)]),
    "sub": (lambda a, b: mc.sum_(mc.mul(mc.sub(a, b), a)), [(3, 2), (3, 2)]),
    "mul": (lambda a, b: mc.sum_(mc.mul(a, b)), [(2, 3), (2, 3)]),
    "scale": (lambda a: mc.sum_(mc.mul(mc.scale(a, -1.7), a)), [(4,)]),
    "add_row": (lambda x, v: mc.sum_(mc.exp(mc.add_row(x, v))), [(2, 3, 4), (4,)]),
    "mul_row": (lambda x, v: mc.sum_(mc.exp(mc.mul_row(x, v))), [(3, 4), (4,)]),
    "matmul": (lambda a, b: mc.sum_(mc.exp(mc.scale(mc.matmul(a, b), 0.3))), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: mc.sum_(mc.exp(mc.scale(mc.matmul(a, b), 0.3))), [(2, 3, 4), (2, 4, 3)]),
    "matmul_large": (lambda a, b: mc.sum_(mc.exp(mc.scale(mc.matmul(a, b), 0.1))), [(9, 10), (10, 3)]),
    "transpose": (lambda a: mc.sum_(mc.mul(mc.transpose(a, (1, 0, 2)), mc.transpose(a, (1, 0, 2)))),
                  [(2, 3, 2)]),
    "reshape": (lambda a: mc.sum_(mc.exp(mc.reshape(a, (3, 4)))), [(2, 6)]),
    "relu": (lambda a: mc.sum_(mc.mul(mc.relu(a), a)), [(3, 5)]),
    "exp": (lambda a: mc.sum_(mc.exp(a)), [(4,)]),
    "clip": (lambda a: mc.sum_(mc.mul(mc.clip(a, -0.5, 0.5), a)), [(6,)]),
    "softmax": (lambda a, w: mc.sum_(mc.mul(mc.softmax(a, axis=0), w)), [(3, 4), (3, 4)]),
    "layer_norm": (lambda x, g, b, w: mc.sum_(mc.mul(mc.layer_norm(x, g, b), w)), [(3, 4), (4,), (4,), (3, 4)]),
    "cross_entropy": (lambda z: mc.cross_entropy(z, [0, 2, 1]), [(3, 3)]),
    "sum_axis": (lambda a: mc.sum_(mc.exp(mc.sum_(a, axis=1))), [(2, 3)]),
    "mean": (lambda a: mc.mean(mc.exp(mc.mean(a, axis=0))), [(3, 2)]),
    "embedding": (lambda t: mc.sum_(mc.exp(mc.embedding(t, np.array([[0, 2, 2], [1, 0, 3]])))), [(4, 3)]),
    "laplacian": (lambda u, w: mc.sum_(mc.mul(mc.laplacian1d(u, 0.7), w)), [(5, 3), (5, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("point", range(10))
def test_primitive_gradients_match_finite_differences(name, point):
    f, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(1000 * point + len(name))
    inputs = [rng.standard_normal(s) for s in shapes]
    if name == "clip":  # keep away from the kinks
        inputs[0] = np.where(np.abs(np.abs(inputs[0]) - 0.5) < 1e-3, 0.0, inputs[0])
    if name == "relu":
        inputs[0] = np.where(np.abs(inputs[0]) < 1e-3, 0.1, inputs[0])
    assert max(gradcheck(f, inputs)) < 1e-4


def test_numeric_gradient_helper():
    g = mc.numeric_gradient(lambda x: float(np.sum(x ** 3)), np.array([1.0, 2.0]))
    assert np.allclose(g, [3.0, 12.0], rtol=1e-8)
