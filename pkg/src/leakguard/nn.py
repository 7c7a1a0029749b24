"""Small dense networks with hand-written backprop.

Shared by the autoencoder (squared-error loss) and the MLP / softmax
service models (cross-entropy loss).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, TrainingError

ACTIVATIONS = ("relu", "linear")


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DomainError(
                f"layer shapes do not chain: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str) -> Layer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return Layer(w, np.zeros(fan_out), activation)


def build_stack(rng, widths, hidden_activation="relu", output_activation="linear"):
    """Layers for ``widths[0] -> widths[1] -> ... -> widths[-1]``."""
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        layers.append(glorot_layer(rng, a, b, output_activation if last else hidden_activation))
    return layers


def check_chain(layers, input_dim: int) -> None:
    width = input_dim
    for i, layer in enumerate(layers):
        if layer.fan_in != width:
            raise DomainError(f"layer {i} expects {layer.fan_in} inputs, previous width is {width}")
        width = layer.fan_out


def forward(layers, x: np.ndarray) -> np.ndarray:
    h = x
    for layer in layers:
        h = h @ layer.weight + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grads(layers, x, target, loss="mse", l2=0.0):
    """Mean loss over the batch and gradients for every layer.

    ``loss="mse"``: mean over rows of (1/k)·||out - target||², target is a matrix.
    ``loss="xent"``: mean softmax cross-entropy, target holds integer labels.
    Returns ``(loss, [(dW, db), ...])``.
    """
    n = x.shape[0]
    acts = [x]
    pre = []
    h = x
    for layer in layers:
        z = h @ layer.weight + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    out = acts[-1]

    if loss == "mse":
        diff = out - target
        value = float(np.mean(np.sum(diff * diff, axis=1)) / out.shape[1])
        grad = 2.0 * diff / (n * out.shape[1])
    elif loss == "xent":
        p = softmax(out)
        idx = np.arange(n)
        value = float(-np.mean(np.log(np.maximum(p[idx, target], 1e-300))))
        grad = p
        grad[idx, target] -= 1.0
        grad /= n
    else:
        raise DomainError(f"unknown loss {loss!r}")

    if l2:
        value += 0.5 * l2 * sum(float(np.sum(layer.weight**2)) for layer in layers)

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation == "relu":
            grad = grad * (pre[i] > 0)
        dw = acts[i].T @ grad
        if l2:
            dw = dw + l2 * layer.weight
        grads[i] = (dw, grad.sum(axis=0))
        if i:
            grad = grad @ layer.weight.T
    return value, grads


@dataclass
class Optimizer:
    """Mini-batch SGD or Adam over a list of layers."""

    kind: str = "sgd"
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: list = field(default_factory=list, repr=False)
    _v: list = field(default_factory=list, repr=False)
    _step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise DomainError(f"unknown optimizer {self.kind!r}")

    def apply(self, layers, grads) -> None:
        if self.kind == "sgd":
            for layer, (dw, db) in zip(layers, grads):
                layer.weight -= self.learning_rate * dw
                layer.bias -= self.learning_rate * db
            return
        if not self._m:
            self._m = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in layers]
            self._v = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in layers]
        self._step += 1
        c1 = 1.0 - self.beta1**self._step
        c2 = 1.0 - self.beta2**self._step
        for layer, (dw, db), m, v in zip(layers, grads, self._m, self._v):
            for param, g, mi, vi in ((layer.weight, dw, m[0], v[0]), (layer.bias, db, m[1], v[1])):
                mi *= self.beta1
                mi += (1 - self.beta1) * g
                vi *= self.beta2
                vi += (1 - self.beta2) * g * g
                param -= self.learning_rate * (mi / c1) / (np.sqrt(vi / c2) + self.eps)


def fit(layers, x, target, *, loss, epochs, batch_size, optimizer, rng, l2=0.0, keep_best=True):
    """Train ``layers`` in place; returns the per-epoch full-data loss trace.

    Entry 0 of the trace is the loss before any update. With ``keep_best`` the
    layers end at the epoch with the lowest full-data loss, so the result is
    never worse than the initialization.
    """
    n = x.shape[0]
    if batch_size < 1 or batch_size > n:
        raise DomainError(f"batch_size must be in [1, {n}], got {batch_size}")

    def full_loss():
        out = forward(layers, x)
        if loss == "mse":
            diff = out - target
            return float(np.mean(np.sum(diff * diff, axis=1)) / diff.shape[1])
        p = softmax(out)[np.arange(n), target]
        value = float(-np.mean(np.log(np.maximum(p, 1e-300))))
        if l2:
            value += 0.5 * l2 * sum(float(np.sum(l.weight**2)) for l in layers)
        return value

    trace = [full_loss()]
    best = trace[0]
    best_layers = [l.copy() for l in layers]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tgt = target[idx]
            # overflow is reported below as a TrainingError, not as numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = loss_and_grads(layers, x[idx], tgt, loss=loss, l2=l2)
            if not np.isfinite(value):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
            optimizer.apply(layers, grads)
        with np.errstate(over="ignore", invalid="ignore"):
            current = full_loss()
        if not np.isfinite(current):
            raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch=epoch)
        trace.append(current)
        if current <= best:
            best = current
            best_layers = [l.copy() for l in layers]
    if keep_best:
        for layer, saved in zip(layers, best_layers):
            layer.weight[...] = saved.weight
            layer.bias[...] = saved.bias
    return trace
