"""Mini-batch SGD with momentum, per-epoch annealing and early stopping."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .features import LabeledDataset
from .network import Network, backward, cost, forward, predict

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"divergence: non-finite gradient in {layer}")
        self.layer = layer


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum_init: float = 0.5
    momentum_growth: float = 1.02
    momentum_cap: float = 0.99
    lr_decay: float = 0.985
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        p = []
        if not self.learning_rate >= 0:
            p.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum_init < 1:
            p.append(f"momentum_init must lie in [0, 1), got {self.momentum_init}")
        if not self.momentum_init <= self.momentum_cap < 1:
            p.append(f"momentum_cap must lie in [momentum_init, 1), got {self.momentum_cap}")
        if not self.momentum_growth >= 1:
            p.append(f"momentum_growth must be >= 1, got {self.momentum_growth}")
        if not 0 < self.lr_decay <= 1:
            p.append(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                p.append(f"{name} must be a positive integer")
        return p


@dataclass
class TrainState:
    lr0: float
    momentum0: float
    epoch: int = 0
    lr: float = 0.0
    momentum: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)
    best_valid_error: float = float("inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    # rows of (epoch, lr, momentum, train_cost, valid_error)
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def start(cls, net: Network, config: TrainConfig) -> "TrainState":
        return cls(
            lr0=config.learning_rate,
            momentum0=config.momentum_init,
            lr=config.learning_rate,
            momentum=config.momentum_init,
            velocity=[np.zeros_like(p) for p in net.params()],
        )


def anneal(state: TrainState, config: TrainConfig) -> TrainState:
    """Advance one epoch: lr decays by 1.5%, momentum grows by 2% up to the cap.

    Values are computed in closed form from the starting values so that after
    k epochs they equal ``lr0 * decay**k`` and ``min(cap, m0 * growth**k)``
    exactly, with no drift from repeated multiplication.
    """
    k = state.epoch + 1
    return replace(
        state,
        epoch=k,
        lr=state.lr0 * config.lr_decay**k,
        momentum=min(config.momentum_cap, state.momentum0 * config.momentum_growth**k),
    )


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float, names=None):
    """velocity' = momentum * velocity - lr * grad; params' = params + velocity'.

    Returns new lists; inputs are not modified.
    """
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity must have the same length")
    new_p, new_v = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        p, g, v = np.asarray(p, float), np.asarray(g, float), np.asarray(v, float)
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape}, {g.shape}, {v.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(names[i] if names else f"parameter {i}")
        v2 = momentum * v - lr * g
        new_p.append(p + v2)
        new_v.append(v2)
    return new_p, new_v


def param_names(net: Network) -> list[str]:
    n = len(net.layers)
    names = []
    for i in range(n):
        tag = "softmax layer" if i == n - 1 else f"hidden layer {i + 1}"
        names += [f"{tag} weights", f"{tag} bias"]
    return names


def zero_one_error(net: Network, data: LabeledDataset) -> float:
    return float(np.mean(predict(net, data.X) != data.y))


def _set_params(net: Network, flat: list[np.ndarray]) -> None:
    for layer, W, b in zip(net.layers, flat[0::2], flat[1::2]):
        layer.weights = W
        layer.bias = b


def train(net: Network, train_set: LabeledDataset, valid_set: LabeledDataset, config: TrainConfig):
    """Train a copy of ``net``; return (best-validation snapshot, final TrainState).

    Each epoch shuffles the training rows with ``default_rng([seed, epoch])``
    and draws dropout masks from ``default_rng([seed, epoch, 1])``.
    """
    if len(valid_set) == 0:
        raise ValueError("validation set is empty")
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    net = net.copy()
    state = TrainState.start(net, config)
    if len(np.unique(valid_set.y)) < 2:
        state.warnings.append("validation set holds a single class; early stopping is unreliable")
        log.warning(state.warnings[-1])
    names = param_names(net)
    best = net.copy()
    n = len(train_set)
    for _ in range(config.max_epochs):
        epoch = state.epoch + 1
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        costs = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = train_set.X[idx], train_set.y[idx]
            trace = forward(net, xb, "train", drop_rng)
            costs.append(cost(net, trace, yb))
            grads = [g for pair in backward(net, trace, yb) for g in pair]
            params, state.velocity = sgd_momentum_step(
                net.params(), grads, state.velocity, state.lr, state.momentum, names
            )
            _set_params(net, params)
        train_cost = float(np.mean(costs))
        valid_error = zero_one_error(net, valid_set)
        state.history.append((epoch, state.lr, state.momentum, train_cost, valid_error))
        if valid_error < state.best_valid_error:
            state.best_valid_error = valid_error
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
            best = net.copy()
        else:
            state.epochs_since_improvement += 1
        state = anneal(state, config)
        if state.epochs_since_improvement >= config.patience:
            break
    return best, state


def write_history_csv(path, state: TrainState) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "momentum", "train_cost", "valid_error"])
        for epoch, lr, m, c, e in state.history:
            w.writerow([epoch, repr(float(lr)), repr(float(m)), repr(float(c)), repr(float(e))])
