import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from churnnet.network import (
    Architecture,
    LayerParams,
    Network,
    activate,
    backward,
    cost,
    dropout_mask,
    forward,
    gradient_check,
    hidden_widths,
    init_network,
    layer_sizes,
    load_network,
    logistic,
    numeric_gradients,
    params_finite,
    predict,
    predict_proba,
    save_network,
    softmax,
)

from oracles import oracle_softmax_rows

SCALAR_ACT = {
    "relu": lambda v: max(v, 0.0),
    "tanh": math.tanh,
    "logistic": lambda v: 1 / (1 + math.exp(-v)),
}


def oracle_forward(net, x):
    """Per-sample, per-unit loops in plain Python floats."""
    out = []
    f = SCALAR_ACT[net.arch.hidden_activation]
    for row in np.atleast_2d(x).tolist():
        a = row
        for i, layer in enumerate(net.layers):
            W, b = layer.weights.tolist(), layer.bias.tolist()
            z = [math.fsum(a[k] * W[k][j] for k in range(len(a))) + b[j] for j in range(len(b))]
            a = z if i == len(net.layers) - 1 else [f(v) for v in z]
        out.append(oracle_softmax_rows([a])[0])
    return np.array(out)


def oracle_cost(net, x, y, l1, l2):
    probs = oracle_forward(net, x)
    nll = -math.fsum(math.log(max(p[t], 1e-12)) for p, t in zip(probs, y)) / len(y)
    W = net.layers[-1].weights.reshape(-1).tolist()
    return nll + l2 / 2 * math.fsum(w * w for w in W) + l1 * math.fsum(abs(w) for w in W)


def random_net(seed, sizes=(6, 5, 4, 2), act="relu", keep_p=1.0, l1=0.0, l2=0.0):
    net = init_network(Architecture(sizes, act, keep_p, l1, l2), seed)
    rng = np.random.default_rng(seed + 1000)
    net.layers[-1].weights = rng.normal(0, 0.5, net.layers[-1].weights.shape)  # zero init hides bugs
    for layer in net.layers:
        layer.bias = rng.normal(0, 0.1, layer.bias.shape)
    return net


# ---------------------------------------------------------------- primitives

def test_softmax_examples():
    assert np.allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    p = softmax(np.array([[1000.0, 0.0], [-1000.0, 0.0]]))
    assert np.all(np.isfinite(p)) and np.allclose(p, [[1, 0], [0, 1]])


@given(st.lists(st.tuples(st.floats(-700, 700), st.floats(-700, 700)), min_size=1, max_size=20))
def test_softmax_matches_oracle(rows):
    z = np.array(rows)
    assert np.allclose(softmax(z), oracle_softmax_rows(rows), rtol=1e-12, atol=1e-300)


def test_logistic_extremes():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    out = logistic(z)
    assert np.all(np.isfinite(out))
    assert out[2] == 0.5 and out[0] == 0.0 and out[-1] == 1.0
    assert math.isclose(out[1], 1 / (1 + math.exp(30)), rel_tol=1e-12)


def test_activate_rejects_unknown():
    with pytest.raises(ValueError):
        activate(np.zeros(2), "swish")
    assert activate(np.array([-1.0, 2.0]), "relu").tolist() == [0.0, 2.0]


def test_dropout_mask():
    m = dropout_mask((1000, 50), 0.5, 0)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert abs(m.mean() - 0.5) < 0.01
    assert np.array_equal(m, dropout_mask((1000, 50), 0.5, 0))
    assert np.all(dropout_mask((3, 3), 1.0, 1) == 1)
    with pytest.raises(ValueError):
        dropout_mask((2,), 0.0, 0)


# ---------------------------------------------------------------- architecture

def test_hidden_widths_example():
    assert layer_sizes(100, 4) == (100, 64, 32, 2)
    assert hidden_widths(100, 6) == [64, 32, 16, 8]
    assert hidden_widths(100, 8) == [64, 32, 16, 8, 8, 8]
    assert hidden_widths(64, 3) == [32]
    with pytest.raises(ValueError):
        hidden_widths(100, 2)


@pytest.mark.parametrize(
    "kwargs",
    [dict(layer_sizes=(5, 2)), dict(layer_sizes=(5, 3, 3)), dict(layer_sizes=(5, 0, 2)),
     dict(layer_sizes=(5, 3, 2), hidden_activation="swish"), dict(layer_sizes=(5, 3, 2), keep_p=0),
     dict(layer_sizes=(5, 3, 2), l2=-1)],
)
def test_architecture_validation(kwargs):
    with pytest.raises(ValueError):
        Architecture(**kwargs)


def test_init():
    net = init_network(Architecture((100, 64, 32, 2)), seed=3)
    W0 = net.layers[0].weights
    r = math.sqrt(6 / (100 + 64))
    assert W0.shape == (100, 64) and np.all(np.abs(W0) <= r)
    assert np.abs(W0).max() > 0.9 * r
    assert np.all(net.layers[-1].weights == 0) and np.all(net.layers[-1].bias == 0)
    assert all(np.all(l.bias == 0) for l in net.layers)
    again = init_network(Architecture((100, 64, 32, 2)), seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), again.params()))


def test_zero_output_layer_predicts_half():
    net = init_network(Architecture((4, 3, 2)), 0)
    assert np.allclose(predict_proba(net, np.ones((3, 4))), 0.5)
    assert predict(net, np.ones((3, 4))).tolist() == [0, 0, 0]  # tie goes to class 0


# ---------------------------------------------------------------- forward / cost / backward

@pytest.mark.parametrize("act", ["relu", "tanh", "logistic"])
def test_forward_matches_oracle(act):
    net = random_net(1, act=act)
    x = np.random.default_rng(2).normal(size=(7, 6))
    assert np.allclose(predict_proba(net, x), oracle_forward(net, x), rtol=1e-12, atol=1e-15)


def test_forward_single_row_and_bad_width():
    net = random_net(0)
    assert predict_proba(net, np.zeros(6)).shape == (1, 2)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 5)))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 6)), mode="eval")


def test_cost_matches_oracle():
    net = random_net(4, l1=0.01, l2=0.1)
    x = np.random.default_rng(5).normal(size=(9, 6))
    y = np.array([0, 1, 1, 0, 1, 0, 0, 1, 1])
    got = cost(net, forward(net, x), y)
    assert math.isclose(got, oracle_cost(net, x, y, 0.01, 0.1), rel_tol=1e-12)


def test_cost_log_floor():
    net = Network(Architecture((1, 1, 2), "relu", 1.0), [
        LayerParams(np.array([[1.0]]), np.zeros(1)),
        LayerParams(np.array([[1000.0, -1000.0]]), np.zeros(2)),
    ])
    c = cost(net, forward(net, np.array([[1.0]])), [1])
    assert math.isfinite(c) and math.isclose(c, -math.log(1e-12))


def test_cost_rejects_bad_labels():
    net = random_net(0)
    tr = forward(net, np.zeros((2, 6)))
    with pytest.raises(ValueError):
        cost(net, tr, [0, 2])
    with pytest.raises(ValueError):
        cost(net, tr, [0])


def fd_oracle(net, x, y, l1, l2, eps=1e-6):
    """Central differences of the plain-Python oracle cost."""
    grads = []
    for layer in net.layers:
        pair = []
        for arr in (layer.weights, layer.bias):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = oracle_cost(net, x, y, l1, l2)
                flat[j] = orig - eps
                down = oracle_cost(net, x, y, l1, l2)
                flat[j] = orig
                gflat[j] = (up - down) / (2 * eps)
            pair.append(g)
        grads.append(pair)
    return grads


@pytest.mark.parametrize("act", ["relu", "tanh", "logistic"])
def test_backward_matches_fd_oracle(act):
    net = random_net(7, sizes=(4, 3, 3, 2), act=act, l1=0.01, l2=0.05)
    x = np.random.default_rng(8).normal(size=(5, 4))
    y = np.array([0, 1, 1, 0, 1])
    analytic = backward(net, forward(net, x), y)
    for (gW, gb), (nW, nb) in zip(analytic, fd_oracle(net, x, y, 0.01, 0.05)):
        assert np.allclose(gW, nW, rtol=1e-5, atol=1e-8)
        assert np.allclose(gb, nb, rtol=1e-5, atol=1e-8)


def test_numeric_gradients_agree_with_fd_oracle():
    net = random_net(9, sizes=(3, 3, 2), act="tanh", l2=0.1)
    x = np.random.default_rng(1).normal(size=(4, 3))
    y = np.array([1, 0, 1, 1])
    ours = numeric_gradients(net, x, y)
    theirs = [g for pair in fd_oracle(net, x, y, 0.0, 0.1) for g in pair]
    for a, b in zip(ours, theirs):
        assert np.allclose(a.astype(float), b, rtol=1e-5, atol=1e-8)


def test_backward_with_dropout_mask_matches_fd_of_masked_net():
    # with a fixed mask, the training-mode cost is a smooth function of the weights
    net = random_net(11, sizes=(4, 5, 2), act="tanh", keep_p=0.5)
    x = np.random.default_rng(3).normal(size=(6, 4))
    y = np.array([0, 1, 0, 1, 1, 0])
    trace = forward(net, x, "train", rng=4)
    mask = trace.masks[0]
    analytic = backward(net, trace, y)

    def masked_cost():
        h = np.tanh(x @ net.layers[0].weights + net.layers[0].bias) * mask / 0.5
        p = oracle_softmax_rows((h @ net.layers[1].weights + net.layers[1].bias).tolist())
        return -sum(math.log(p[i][t]) for i, t in enumerate(y)) / len(y)

    W = net.layers[0].weights
    eps = 1e-6
    for idx in [(0, 0), (1, 3), (3, 4)]:
        orig = W[idx]
        W[idx] = orig + eps
        up = masked_cost()
        W[idx] = orig - eps
        down = masked_cost()
        W[idx] = orig
        assert math.isclose(analytic[0][0][idx], (up - down) / (2 * eps), rel_tol=1e-5, abs_tol=1e-9)


def test_gradient_check_small():
    net = random_net(2, act="logistic", l1=1e-3, l2=1e-2)
    x = np.random.default_rng(0).normal(size=(5, 6))
    assert gradient_check(net, x, [0, 1, 0, 1, 1]) < 1e-4


def test_gradient_check_catches_a_broken_gradient(monkeypatch):
    import churnnet.network as nw

    real = nw.backward

    def broken(*a, **k):
        g = real(*a, **k)
        g[0] = (g[0][0] * 1.01, g[0][1])
        return g

    monkeypatch.setattr(nw, "backward", broken)
    net = random_net(2, act="tanh")
    x = np.random.default_rng(0).normal(size=(5, 6))
    assert gradient_check(net, x, [0, 1, 0, 1, 1]) > 1e-3


# ---------------------------------------------------------------- persistence

def test_save_load_round_trip(tmp_path):
    net = random_net(5, act="tanh", keep_p=0.7, l1=1e-5, l2=1e-4)
    path = tmp_path / "model.json"
    save_network(net, path)
    back = load_network(path)
    assert back.arch == net.arch
    assert all(np.array_equal(a, b) for a, b in zip(back.params(), net.params()))
    x = np.random.default_rng(0).normal(size=(4, 6))
    assert np.array_equal(predict_proba(back, x), predict_proba(net, x))


def test_load_rejects_other_formats(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_network(p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["relu", "tanh", "logistic"]), st.floats(-50, 50))
def test_forward_rows_are_distributions(seed, act, scale):
    net = random_net(seed, act=act)
    x = np.random.default_rng(seed).normal(size=(8, 6)) * scale
    p = predict_proba(net, x)
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-12)
    assert params_finite(net.params())
