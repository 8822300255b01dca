import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from metaser import autodiff as ad
from metaser.autodiff import NumericError, Parameter, ShapeError, Tape, Tensor
from metaser.gradcheck import rel_error
from metaser.optim import Optimizer, OptimizerState, sgd_adam_step


def numeric_grad(f, p: Parameter, eps=1e-5):
    out = np.zeros_like(p.data)
    flat, oflat = p.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f().data)
        flat[i] = orig - eps
        down = float(f().data)
        flat[i] = orig
        oflat[i] = (up - down) / (2 * eps)
    return out


def tape_grads(f):
    with Tape() as tape:
        loss = f()
    return tape.backward(loss)


# ---------------------------------------------------------------- forward values

def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)),
                  elements=st.floats(-20, 20)))
def test_softmax_rows_and_log_softmax(x):
    s = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    ls = ad.log_softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(ls, np.log(s), atol=1e-9)


def test_logsumexp_large_values_stable():
    x = Tensor(np.array([1000.0, 1000.0]))
    assert ad.logsumexp(x, axis=-1).data == pytest.approx(1000 + math.log(2))


def test_layer_norm_standardises_rows():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(6, 16))
    y = ad.layer_norm(Tensor(x), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_zero_signal_is_finite():
    y = ad.layer_norm(Tensor(np.zeros((2, 4)))).data
    assert np.isfinite(y).all()


def test_pointwise_values():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    t = Tensor(x)
    np.testing.assert_array_equal(ad.relu(t).data, np.maximum(x, 0))
    np.testing.assert_allclose(ad.sigmoid(t).data, 1 / (1 + np.exp(-x)), atol=1e-15)
    np.testing.assert_allclose(ad.tanh(t).data, np.tanh(x), atol=1e-15)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(ad.gelu(t).data, ref, atol=1e-15)


def test_sigmoid_extreme_inputs_finite():
    y = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    np.testing.assert_array_equal(y, [0.0, 1.0])


def test_concat_slice_embedding():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 3)))
    assert ad.concat([a, b], axis=1).shape == (2, 5)
    table = Tensor(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(ad.embedding_lookup(table, [3, 0]).data, [[9, 10, 11], [0, 1, 2]])
    np.testing.assert_array_equal(ad.getitem(table, (slice(1, 3), 0)).data, [3, 6])


def test_dropout_semantics():
    x = Tensor(np.ones((200, 50)))
    np.testing.assert_array_equal(ad.dropout(x, 0.3, None, training=False).data, x.data)
    y1 = ad.dropout(x, 0.3, np.random.default_rng(5)).data
    y2 = ad.dropout(x, 0.3, np.random.default_rng(5)).data
    np.testing.assert_array_equal(y1, y2)
    kept = y1 != 0
    np.testing.assert_allclose(y1[kept], 1 / 0.7)
    assert abs(kept.mean() - 0.7) < 0.02
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------- errors

def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_non_finite_output_names_op():
    with pytest.raises(NumericError, match="log"):
        ad.log(Tensor(np.array([-1.0])))
    with pytest.raises(NumericError, match="div"):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


def test_non_scalar_loss_rejected():
    w = Parameter(np.ones(3), "w")
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


# ---------------------------------------------------------------- gradients

def test_sum_of_squares_gradient():
    w = Parameter(np.array([1.0, 2.0]), "w")
    grads = tape_grads(lambda: ad.sum_(w * w))
    np.testing.assert_array_equal(grads["w"], [2.0, 4.0])


def test_frozen_parameter_absent_from_gradient_map():
    w = Parameter(np.array([1.0, 2.0]), "w")
    f = Parameter(np.array([3.0, 4.0]), "f", trainable=False)
    grads = tape_grads(lambda: ad.sum_(w * f))
    assert set(grads) == {"w"}
    np.testing.assert_array_equal(grads["w"], [3.0, 4.0])


def test_shared_subexpression_visited_once():
    w = Parameter(np.array([1.5]), "w")
    with Tape() as tape:
        h = w * w
        loss = ad.sum_(h + h * h)
    g = tape.backward(loss)["w"]
    # d/dw (w^2 + w^4) = 2w + 4w^3
    np.testing.assert_allclose(g, 2 * 1.5 + 4 * 1.5 ** 3)
    nodes = tape.nodes
    assert len({id(n) for n in nodes}) == len(nodes)


PRIMITIVES = {
    "matmul": lambda x, y: ad.matmul(x, y),
    "mul_div": lambda x, y: (x * y) / (ad.exp(y) + 1.0),
    "softmax": lambda x, y: ad.softmax(x, axis=0) * y,
    "log_softmax": lambda x, y: ad.log_softmax(x, axis=1) * y,
    "logsumexp": lambda x, y: ad.logsumexp(x + y, axis=1),
    "layer_norm": lambda x, y: ad.layer_norm(x, Tensor(np.arange(1.0, 4.0)), None) * y,
    "gelu_tanh_sigmoid": lambda x, y: ad.gelu(x) + ad.tanh(y) * ad.sigmoid(x),
    "concat_slice": lambda x, y: ad.getitem(ad.concat([x, y], axis=0), (slice(1, 5), slice(0, 2))),
    "mean_transpose": lambda x, y: ad.mean(ad.transpose(x) @ y, axis=0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = Parameter(rng.normal(size=(3, 3)), "x")
    y = Parameter(rng.normal(size=(3, 3)), "y")
    fn = PRIMITIVES[name]
    out_shape = fn(x, y).shape
    proj = Tensor(rng.normal(size=out_shape))

    def f():
        return ad.sum_(fn(x, y) * proj)

    grads = tape_grads(f)
    for p in (x, y):
        assert rel_error(grads[p.name], numeric_grad(f, p)) < 1e-6


def test_attention_gradient_with_key_mask():
    rng = np.random.default_rng(3)
    q, k, v = (Parameter(rng.normal(size=(2, 2, 4, 3)), n) for n in "qkv")
    bias = np.zeros((2, 1, 1, 4))
    bias[1, ..., 3] = -1e9
    proj = Tensor(rng.normal(size=(2, 2, 4, 3)))

    def f():
        return ad.sum_(ad.attention(q, k, v, bias) * proj)

    grads = tape_grads(f)
    for p in (q, k, v):
        assert rel_error(grads[p.name], numeric_grad(f, p)) < 1e-6
    # masked key contributes nothing
    assert np.all(grads["k"][1, :, 3] == 0)


def test_attention_matches_reference():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(1, 2, 3, 4)) for _ in range(3))
    s = q @ k.swapaxes(-1, -2) / 2.0
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    np.testing.assert_allclose(ad.attention(Tensor(q), Tensor(k), Tensor(v)).data, a @ v, atol=1e-12)


def test_conv1d_gradient_and_values():
    rng = np.random.default_rng(6)
    x = Parameter(rng.normal(size=(2, 11, 2)), "x")
    w = Parameter(rng.normal(size=(3, 2, 4)), "w")
    b = Parameter(rng.normal(size=4), "b")
    out = ad.conv1d(x, w, b, stride=2, pad=(1, 1))
    xp = np.pad(x.data, ((0, 0), (1, 1), (0, 0)))
    ref = np.stack([np.einsum("bkc,kco->bo", xp[:, 2 * t:2 * t + 3], w.data) for t in range(out.shape[1])], 1) + b.data
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    proj = Tensor(rng.normal(size=out.shape))

    def f():
        return ad.sum_(ad.conv1d(x, w, b, 2, (1, 1)) * proj)

    grads = tape_grads(f)
    for p in (x, w, b):
        assert rel_error(grads[p.name], numeric_grad(f, p)) < 1e-6


def test_broadcast_gradient_reduces_to_parameter_shape():
    b = Parameter(np.zeros(3), "b")
    x = Tensor(np.ones((4, 3)))
    grads = tape_grads(lambda: ad.sum_(x + b))
    np.testing.assert_array_equal(grads["b"], [4.0, 4.0, 4.0])


def test_forward_and_gradients_deterministic():
    def run():
        rng = np.random.default_rng(11)
        w = Parameter(rng.normal(size=(5, 5)), "w")
        x = Tensor(rng.normal(size=(3, 5)))
        with Tape() as tape:
            h = ad.gelu(x @ w)
            loss = ad.sum_(h * h)
        return loss.data, tape.backward(loss)["w"]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


# ---------------------------------------------------------------- optimizer

def test_sgd_step():
    w = Parameter(np.array([1.0]), "w")
    sgd_adam_step({"w": w}, {"w": np.array([2.0])}, 0.1, OptimizerState(), rule="sgd")
    assert w.data[0] == pytest.approx(0.8)


def test_adam_first_step_closed_form():
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    lr, eps = 1e-3, 1e-8
    w = Parameter(np.array([0.0]), "w")
    sgd_adam_step({"w": w}, {"w": np.array([1.0])}, lr, OptimizerState(), eps=eps)
    assert w.data[0] == pytest.approx(-lr * 1.0 / (1.0 + eps), rel=1e-12)


def test_optimizer_rejects_unknown_and_frozen():
    w = Parameter(np.zeros(1), "w")
    f = Parameter(np.zeros(1), "f", trainable=False)
    params = {"w": w, "f": f}
    with pytest.raises(KeyError):
        sgd_adam_step(params, {"nope": np.zeros(1)}, 0.1, OptimizerState())
    with pytest.raises(ValueError, match="frozen"):
        sgd_adam_step(params, {"f": np.zeros(1)}, 0.1, OptimizerState())


def test_frozen_parameter_bit_identical_over_many_steps():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=4), "w")
    f = Parameter(rng.normal(size=4), "f", trainable=False)
    before = f.data.tobytes()
    opt = Optimizer([w, f], 1e-2)
    for _ in range(10_000):
        with Tape() as tape:
            loss = ad.sum_(w * f)
        opt.step(tape.backward(loss))
    assert f.data.tobytes() == before


def test_per_group_learning_rates():
    a = Parameter(np.zeros(1), "encoder.x")
    b = Parameter(np.zeros(1), "heads.y")
    opt = Optimizer([a, b], lambda n: 0.1 if n.startswith("encoder.") else 1.0, rule="sgd")
    opt.step({"encoder.x": np.ones(1), "heads.y": np.ones(1)})
    assert a.data[0] == pytest.approx(-0.1) and b.data[0] == pytest.approx(-1.0)
