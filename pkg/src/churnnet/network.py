"""Feed-forward classifier: hidden layers with dropout, two-way softmax output.

Hidden layers compute ``a = f(x @ W + b)``; in training mode each hidden
output is multiplied by a Bernoulli(keep_p) mask and rescaled by ``1/keep_p``
(inverted dropout), so the test-mode pass needs no correction. The output
layer is a softmax over two classes whose weights start at zero. L1 and L2
penalties apply to the output-layer weights only.

Gradients are derived by hand (see :func:`backward`) and checked against
central finite differences in :func:`gradient_check`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MODEL_FORMAT = "churnnet-model/1"
LOG_FLOOR = 1e-12
N_CLASSES = 2


def logistic(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z):
    return np.maximum(z, 0)


ACTIVATIONS = {
    "logistic": logistic,
    "tanh": np.tanh,
    "relu": relu,
}


def activate(z, kind: str):
    try:
        f = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None
    return f(np.asarray(z, dtype=np.result_type(z, np.float64)))


def activation_grad(z, a, kind: str):
    """df/dz given pre-activation ``z`` and activation ``a = f(z)``."""
    if kind == "logistic":
        return a * (1 - a)
    if kind == "tanh":
        return 1 - a * a
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(z):
    z = np.asarray(z, dtype=np.result_type(z, np.float64))
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(shape, keep_p: float, rng) -> np.ndarray:
    """Bernoulli(keep_p) 0/1 mask. ``rng`` is a numpy Generator or a seed."""
    if not 0 < keep_p <= 1:
        raise ValueError(f"keep_p must lie in (0, 1], got {keep_p}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return rng.binomial(1, keep_p, size=shape).astype(np.float64)


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    keep_p: float = 0.5
    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ValueError("need an input layer, at least one hidden layer and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive: {sizes}")
        if sizes[-1] != N_CLASSES:
            raise ValueError(f"output layer must have {N_CLASSES} units, got {sizes[-1]}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if not 0 < self.keep_p <= 1:
            raise ValueError(f"keep_p must lie in (0, 1], got {self.keep_p}")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularization constants must be non-negative")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "keep_p": self.keep_p,
            "l1": self.l1,
            "l2": self.l2,
        }


@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())


@dataclass
class Network:
    arch: Architecture
    layers: list[LayerParams]

    def copy(self) -> "Network":
        return Network(self.arch, [p.copy() for p in self.layers])

    def astype(self, dtype) -> "Network":
        return Network(
            self.arch, [LayerParams(p.weights.astype(dtype), p.bias.astype(dtype)) for p in self.layers]
        )

    def params(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...] of the live arrays."""
        return [a for p in self.layers for a in (p.weights, p.bias)]


def init_network(arch: Architecture, seed) -> Network:
    """Hidden weights ~ U(-r, r) with r = sqrt(6 / (fan_in + fan_out)); everything else zero."""
    rng = np.random.default_rng(seed)
    sizes = arch.layer_sizes
    layers = []
    for n_in, n_out in zip(sizes[:-2], sizes[1:-1]):
        r = np.sqrt(6.0 / (n_in + n_out))
        layers.append(LayerParams(rng.uniform(-r, r, size=(n_in, n_out)), np.zeros(n_out)))
    layers.append(LayerParams(np.zeros((sizes[-2], sizes[-1])), np.zeros(sizes[-1])))
    return Network(arch, layers)


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]  # input to each layer: x, then each (masked) hidden output
    pre: list[np.ndarray]  # z for each layer
    hidden: list[np.ndarray]  # f(z) of each hidden layer before masking
    masks: list[np.ndarray] = field(default_factory=list)
    probs: np.ndarray | None = None
    keep_p: float = 1.0


def forward(net: Network, x, mode: str = "test", rng=None) -> ForwardTrace:
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    dtype = net.layers[0].weights.dtype
    a = np.asarray(x, dtype=np.result_type(dtype, np.float64))
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != net.arch.layer_sizes[0]:
        raise ValueError(f"expected input width {net.arch.layer_sizes[0]}, got shape {np.shape(x)}")
    keep_p = net.arch.keep_p
    use_dropout = mode == "train" and keep_p < 1
    if use_dropout:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    f = ACTIVATIONS[net.arch.hidden_activation]
    trace = ForwardTrace([a], [], [], keep_p=keep_p)
    for layer in net.layers[:-1]:
        z = a @ layer.weights + layer.bias
        h = f(z)
        trace.pre.append(z)
        trace.hidden.append(h)
        if use_dropout:
            m = dropout_mask(h.shape, keep_p, rng)
            trace.masks.append(m)
            a = h * m / keep_p
        else:
            a = h
        trace.inputs.append(a)
    out = net.layers[-1]
    z = a @ out.weights + out.bias
    trace.pre.append(z)
    trace.probs = softmax(z)
    return trace


def predict_proba(net: Network, x) -> np.ndarray:
    return forward(net, x, "test").probs


def predict(net: Network, x) -> np.ndarray:
    """Class with the larger probability; ties go to class 0."""
    return np.argmax(predict_proba(net, x), axis=1)


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).astype(np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for a batch of {n}")
    if np.any((y < 0) | (y >= N_CLASSES)):
        raise ValueError("labels must be 0 or 1")
    return y


def cost(net: Network, trace: ForwardTrace, y, l1: float | None = None, l2: float | None = None) -> float:
    """Mean negative log-likelihood plus L1/L2 penalties on the output weights.

    Probabilities are floored at 1e-12 before the log.
    """
    l1 = net.arch.l1 if l1 is None else l1
    l2 = net.arch.l2 if l2 is None else l2
    probs = trace.probs
    y = _check_labels(y, probs.shape[0])
    p_true = probs[np.arange(len(y)), y]
    nll = -np.mean(np.log(np.maximum(p_true, LOG_FLOOR)))
    W = net.layers[-1].weights
    return nll + 0.5 * l2 * np.sum(W * W) + l1 * np.sum(np.abs(W))


def backward(net: Network, trace: ForwardTrace, y, l1: float | None = None, l2: float | None = None):
    """Gradients of :func:`cost` as a list of (dW, db) per layer."""
    l1 = net.arch.l1 if l1 is None else l1
    l2 = net.arch.l2 if l2 is None else l2
    if len(trace.inputs) != len(net.layers):
        raise ValueError("trace does not match the network depth")
    probs = trace.probs
    m = probs.shape[0]
    y = _check_labels(y, m)
    delta = probs.copy()
    delta[np.arange(m), y] -= 1
    delta /= m
    kind = net.arch.hidden_activation
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        W = net.layers[i].weights
        a_in = trace.inputs[i]
        if a_in.shape[1] != W.shape[0] or delta.shape[1] != W.shape[1]:
            raise ValueError(f"shape mismatch at layer {i}")
        gW = a_in.T @ delta
        gb = delta.sum(axis=0)
        if i == len(net.layers) - 1:
            gW = gW + l2 * W + l1 * np.sign(W)
        grads[i] = (gW, gb)
        if i > 0:
            da = delta @ W.T
            if trace.masks:
                da = da * trace.masks[i - 1] / trace.keep_p
            delta = da * activation_grad(trace.pre[i - 1], trace.hidden[i - 1], kind)
    return grads


def _flat_cost(net: Network, X, y) -> float:
    return float(cost(net, forward(net, X, "test"), y))


def fd_step(dtype=np.longdouble) -> float:
    """Central-difference step balancing truncation and rounding error: machine eps ** (1/3)."""
    return float(np.finfo(dtype).eps) ** (1 / 3)


def numeric_gradients(net: Network, X, y, eps: float | None = None, dtype=np.longdouble):
    """Central differences of the cost, computed in ``dtype`` arithmetic.

    The default step also keeps the stencil narrow, so it rarely straddles a
    ReLU kink (where no finite difference is meaningful).
    """
    eps = fd_step(dtype) if eps is None else eps
    probe = net.astype(dtype)
    X = np.asarray(X, dtype=dtype)
    out = []
    for arr in probe.params():
        g = np.zeros(arr.shape, dtype=dtype)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = cost(probe, forward(probe, X, "test"), y)
            flat[j] = orig - eps
            down = cost(probe, forward(probe, X, "test"), y)
            flat[j] = orig
            gflat[j] = (up - down) / (2 * eps)
        out.append(g)
    return out


def gradient_check(net: Network, X, y, eps: float | None = None, floor: float = 1e-6) -> float:
    """Largest relative difference between backprop and finite differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries that are both essentially zero from dividing noise by noise.
    Dropout is ignored (test-mode pass) so the cost is deterministic.
    """
    analytic = backward(net, forward(net, X, "test"), y)
    numeric = numeric_gradients(net, X, y, eps)
    worst = 0.0
    for (gW, gb), nW, nb in zip(analytic, numeric[0::2], numeric[1::2]):
        for a, n in ((gW, nW), (gb, nb)):
            n = n.astype(np.float64)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------- serialization

def network_to_dict(net: Network) -> dict:
    return {
        "format": MODEL_FORMAT,
        "architecture": net.arch.to_dict(),
        "layers": [
            {
                "n_in": int(p.weights.shape[0]),
                "n_out": int(p.weights.shape[1]),
                "weights": [float(v) for v in p.weights.reshape(-1)],
                "bias": [float(v) for v in p.bias],
            }
            for p in net.layers
        ],
    }


def network_from_dict(d: dict) -> Network:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    arch = Architecture(**d["architecture"])
    layers = []
    for spec, (n_in, n_out) in zip(d["layers"], zip(arch.layer_sizes, arch.layer_sizes[1:])):
        if (spec["n_in"], spec["n_out"]) != (n_in, n_out):
            raise ValueError("layer shapes disagree with the architecture block")
        W = np.array(spec["weights"], dtype=np.float64).reshape(n_in, n_out)
        layers.append(LayerParams(W, np.array(spec["bias"], dtype=np.float64)))
    if len(layers) != arch.n_layers - 1:
        raise ValueError("wrong number of layers in model file")
    return Network(arch, layers)


def save_network(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh)
        fh.write("\n")


def load_network(path) -> Network:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def hidden_widths(n_in: int, total_layers: int, floor: int = 8) -> list[int]:
    """Widths of the hidden layers for a net of ``total_layers`` layers (input and output included).

    Starts at the largest power of two below the input size and halves per
    layer, never going under ``floor``: 100 inputs and 4 layers give [64, 32].
    """
    n_hidden = total_layers - 2
    if n_hidden < 1:
        raise ValueError("need at least 3 layers")
    width = 1 << max(0, (n_in - 1).bit_length() - 1)
    out = []
    for _ in range(n_hidden):
        out.append(max(floor, width))
        width //= 2
    return out


def layer_sizes(n_in: int, total_layers: int) -> tuple[int, ...]:
    return (n_in, *hidden_widths(n_in, total_layers), N_CLASSES)


def params_finite(params: Sequence[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(p)) for p in params)
