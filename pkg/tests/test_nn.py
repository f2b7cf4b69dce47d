import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, conv2d_loops, maxpool_loops, relative_error
from palletscan.nn import (
    Conv2d,
    Dense,
    MaxPool2d,
    ModelConfig,
    NumericalError,
    ReLU,
    backward,
    build_network,
    conv_forward,
    cross_entropy,
    dense_forward,
    init_model,
    loss_and_backward,
    maxpool_forward,
    relu,
    sgd_step,
    sigmoid,
    softmax,
)
from palletscan.nn.weights import (
    WeightFileError,
    dumps_classifier,
    load_classifier,
    loads_classifier,
    save_classifier,
)


def _conv(cin, f, seed=0):
    layer = Conv2d(cin, f, 3, input_grad=True)
    rng = np.random.default_rng(seed)
    layer.weight[...] = rng.normal(size=layer.weight.shape)
    layer.bias[...] = rng.normal(size=layer.bias.shape)
    return layer


# ---- forward passes ----

def test_conv_identity_kernel():
    layer = Conv2d(1, 1)
    layer.weight[0, 0, 1, 1] = 1.0
    assert conv_forward(np.array([[[2.5]]]), layer)[0, 0, 0] == 2.5


def test_conv_sum_of_ones():
    layer = Conv2d(1, 1)
    layer.weight[...] = 1.0
    out = conv_forward(np.ones((1, 3, 3)), layer)
    assert out.shape == (1, 3, 3)
    assert out[0, 1, 1] == 9.0
    assert out[0, 0, 0] == 4.0


def test_conv_matches_loops():
    rng = np.random.default_rng(0)
    layer = _conv(1, 3)
    x = rng.normal(size=(1, 5, 5))
    np.testing.assert_allclose(conv_forward(x, layer), conv2d_loops(x[None], layer.weight, layer.bias)[0], atol=1e-10)
    layer = _conv(2, 4, seed=1)
    xb = rng.normal(size=(3, 2, 6, 7))
    np.testing.assert_allclose(layer.forward(xb), conv2d_loops(xb, layer.weight, layer.bias), atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv_forward(np.zeros((2, 4, 4)), Conv2d(1, 1))


def test_relu_examples():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not relu(-np.ones(5)).any()
    x = np.random.default_rng(0).normal(size=20)
    np.testing.assert_array_equal(relu(relu(x)), relu(x))


def test_pool_shapes_and_constant():
    out, _ = maxpool_forward(np.zeros((1, 32, 32)))
    assert out.shape == (1, 30, 30)
    out, _ = maxpool_forward(np.full((2, 5, 5), 3.5))
    assert np.all(out == 3.5)
    with pytest.raises(ValueError):
        maxpool_forward(np.zeros((1, 2, 5)))


@given(st.integers(0, 10**6), st.integers(3, 9), st.integers(3, 9))
def test_pool_matches_loops(seed, h, w):
    rng = np.random.default_rng(seed)
    # small integer range forces ties
    x = rng.integers(0, 4, size=(2, 2, h, w)).astype(float)
    pool = MaxPool2d(3)
    np.testing.assert_array_equal(pool.forward(x), maxpool_loops(x))
    arg = pool.argmax
    for idx in np.ndindex(*arg.shape):
        *lead, i, j = idx
        win = x[tuple(lead)][i:i + 3, j:j + 3]
        # first maximum in column-major window order: leftmost column, then topmost row
        cols = win.T.ravel()
        first = int(np.argmax(cols == win.max()))
        assert arg[idx] == (first % 3) * 3 + first // 3


def test_dense_examples():
    layer = Dense(3, 3)
    layer.weight[...] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(dense_forward(x, layer), x)
    layer = Dense(4, 2)
    layer.bias[...] = [1, 2]
    np.testing.assert_array_equal(dense_forward(np.ones((1, 4)), layer), [[1, 2]])
    rng = np.random.default_rng(0)
    layer.weight[...] = rng.normal(size=(2, 4))
    v = rng.normal(size=4)
    expect = [sum(layer.weight[o, i] * v[i] for i in range(4)) + layer.bias[o] for o in range(2)]
    np.testing.assert_allclose(dense_forward(v[None], layer)[0], expect)
    with pytest.raises(ValueError):
        dense_forward(np.ones((1, 3)), layer)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.array([0.0, math.log(3)])), [0.25, 0.75])
    big = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-100, 100))
def test_softmax_laws(xs, c):
    x = np.array(xs)
    p = softmax(x)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p > 0)
    np.testing.assert_allclose(softmax(x + c), p, atol=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([1.0, 0.0]), 0) == 0.0
    assert cross_entropy(np.array([0.5, 0.5]), 1) == pytest.approx(math.log(2))
    assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        cross_entropy(np.array([0.5, 0.5]), 2)


def test_softmax_cross_entropy_gradient():
    z = np.random.default_rng(3).normal(size=4)
    analytic = softmax(z) - np.eye(4)[2]
    numeric = central_difference(lambda: cross_entropy(softmax(z), 2), z)
    assert relative_error(analytic, numeric) < 1e-4


def test_sigmoid_stable():
    s = sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


# ---- gradients ----

def _check_layer(layer, x, seed=0):
    """Gradient of sum(out * R) w.r.t. input and parameters vs central differences."""
    r = np.random.default_rng(seed).normal(size=layer.forward(x).shape)

    def loss():
        return float(np.sum(layer.forward(x) * r))

    layer.forward(x)
    dx = layer.backward(r)
    errors = [relative_error(dx, central_difference(loss, x))]
    for (_, p), g in zip(layer.params(), [g.copy() for g in layer.grads()]):
        errors.append(relative_error(g, central_difference(loss, p)))
    return max(errors)


def test_layer_gradients():
    rng = np.random.default_rng(0)
    assert _check_layer(_conv(2, 3), rng.normal(size=(2, 2, 5, 5))) < 1e-4
    assert _check_layer(ReLU(), rng.normal(size=(2, 3, 4))) < 1e-4
    assert _check_layer(MaxPool2d(3), rng.normal(size=(2, 2, 5, 6))) < 1e-4
    dense = Dense(5, 3)
    dense.weight[...] = rng.normal(size=(3, 5))
    dense.bias[...] = rng.normal(size=3)
    assert _check_layer(dense, rng.normal(size=(4, 5))) < 1e-4


def tiny_net(conv_layers=1, filters=1, side=4, seed=0):
    return init_model(ModelConfig(conv_layers=conv_layers, filters=filters, fc_hidden=5, input_side=side), seed)


@pytest.mark.parametrize("conv_layers, filters", [(1, 1), (2, 2)])
def test_network_gradients(conv_layers, filters):
    net = tiny_net(conv_layers, filters)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4, 4))
    y = np.array([0, 1, 1])
    grads = backward(net, x, y)

    def loss():
        return float(np.mean(cross_entropy(softmax(net.forward(x[:, None])), y)))

    for p, g in zip(net.parameters(), grads):
        assert g.shape == p.shape
        assert relative_error(g, central_difference(loss, p)) < 1e-4


def test_logit_gradient_closed_form():
    net = tiny_net()
    x = np.random.default_rng(2).normal(size=(1, 4, 4))
    _, probs = loss_and_backward(net, x, np.array([1]))
    out_layer = net.layers[-1]
    # the output bias gradient is dL/dlogits = probs - onehot(label)
    np.testing.assert_allclose(out_layer.dbias, probs[0] - [0, 1], atol=1e-12)
    np.testing.assert_allclose(out_layer.dweight, np.outer(probs[0] - [0, 1], out_layer._x[0]), atol=1e-12)


def test_zero_output_layer_blocks_upstream_gradients():
    net = tiny_net()
    net.layers[-1].weight[...] = 0.0
    grads = backward(net, np.random.default_rng(0).normal(size=(2, 4, 4)), np.array([0, 1]))
    conv_w, conv_b = grads[0], grads[1]
    assert not conv_w.any() and not conv_b.any()


def test_backward_raises_on_nan():
    net = tiny_net()
    x = np.full((1, 4, 4), np.nan)
    with pytest.raises(NumericalError):
        backward(net, x, np.array([0]))


# ---- update and init ----

def test_sgd_examples():
    w = [np.array([1.0])]
    sgd_step(w, [np.array([0.5])], 0.1)
    assert w[0][0] == pytest.approx(0.95)
    sgd_step(w, [np.zeros(1)], 0.1)
    assert w[0][0] == pytest.approx(0.95)
    a, b = [np.array([2.0, -1.0])], [np.array([2.0, -1.0])]
    g = [np.array([0.3, 0.7])]
    sgd_step(a, g, 0.05), sgd_step(a, g, 0.05)
    sgd_step(b, g, 0.1)
    np.testing.assert_allclose(a[0], b[0])
    with pytest.raises(ValueError):
        sgd_step([np.zeros(2)], [np.zeros(3)], 0.1)


def test_init_properties():
    cfg = ModelConfig()
    a, b, c = init_model(cfg, 5), init_model(cfg, 5), init_model(cfg, 6)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.tobytes() == pb.tobytes()
    assert any(not np.array_equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))
    for layer in a.layers:
        if hasattr(layer, "fan_in"):
            assert np.abs(layer.weight).max() <= math.sqrt(6 / layer.fan_in)
            assert not layer.bias.any()


def test_architecture_shape_chain():
    net = build_network(ModelConfig())
    x = np.zeros((2, 1, 32, 32))
    shapes = []
    for layer in net.layers:
        x = layer.forward(x)
        shapes.append(x.shape)
    assert shapes == [(2, 15, 32, 32), (2, 15, 32, 32), (2, 15, 30, 30), (2, 13500), (2, 64), (2, 64), (2, 2)]


def test_config_validation():
    for bad in [dict(conv_layers=0), dict(filters=0), dict(filters=26), dict(num_classes=1)]:
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_loss_decreases_on_toy_problem():
    rng = np.random.default_rng(0)
    x = np.zeros((8, 6, 6))
    x[:4, :3] = 1.0  # class 0: top half lit
    x[4:, 3:] = 1.0  # class 1: bottom half lit
    x += 0.05 * rng.normal(size=x.shape)
    y = np.array([0] * 4 + [1] * 4)
    net = init_model(ModelConfig(filters=4, fc_hidden=8, input_side=6), 0)
    losses = []
    for _ in range(6):
        loss, _ = loss_and_backward(net, x, y)
        losses.append(loss)
        sgd_step(net.parameters(), net.gradients(), 0.01)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# ---- weight files ----

def test_weight_round_trip(tmp_path):
    net = init_model(ModelConfig(conv_layers=2, filters=3, fc_hidden=7, input_side=8), 4)
    data = dumps_classifier(net)
    assert data[:5] == b"PSDW1"
    back = loads_classifier(data)
    assert back.config == net.config
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
    save_classifier(tmp_path / "m.psdw", net)
    x = np.random.default_rng(0).random((2, 8, 8))
    np.testing.assert_array_equal(load_classifier(tmp_path / "m.psdw").predict_proba(x), net.predict_proba(x))


@pytest.mark.parametrize("mangle", [lambda d: b"XXXXX" + d[5:], lambda d: d[:-8], lambda d: d + b"\0" * 8])
def test_weight_file_errors(mangle):
    data = dumps_classifier(init_model(ModelConfig(filters=2, fc_hidden=3, input_side=5), 0))
    with pytest.raises(WeightFileError):
        loads_classifier(mangle(data))


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10**6))
def test_batched_forward_equals_single(seed):
    net = tiny_net(2, 2, side=6, seed=seed % 100)
    x = np.random.default_rng(seed).normal(size=(3, 6, 6))
    batch = net.predict_proba(x)
    for i in range(3):
        np.testing.assert_allclose(net.predict_proba(x[i:i + 1])[0], batch[i], atol=1e-12)
