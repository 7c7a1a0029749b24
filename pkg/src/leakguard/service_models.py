"""The C-class service model that consumes encoder output (or raw features for attack targets)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DomainError, ShapeError
from .numeric import as_matrix, make_rng

KINDS = ("softmax_regression", "mlp", "random_forest")
ALIASES = {"lr": "softmax_regression", "softmax": "softmax_regression", "dnn": "mlp",
           "rf": "random_forest", **{k: k for k in KINDS}}
SHORT_NAMES = {"softmax_regression": "lr", "mlp": "dnn", "random_forest": "rf"}


def canonical_kind(kind: str) -> str:
    try:
        return ALIASES[kind]
    except KeyError:
        raise DomainError(f"unknown model kind {kind!r}; expected one of {sorted(ALIASES)}") from None


@dataclass
class ServiceConfig:
    seed: int = 0
    # softmax regression: full-batch gradient descent
    lr_steps: int = 400
    lr_learning_rate: float = 0.5
    lr_l2: float = 1e-4
    # mlp
    hidden: tuple = (64, 32)
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    # random forest
    n_trees: int = 50
    max_depth: int = 12
    max_features: int | None = None  # default ceil(sqrt(m))
    min_samples_leaf: int = 1
    bootstrap: bool = True


class ServiceModel:
    kind: str
    num_classes: int
    input_dim: int

    def _check(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim not in (1, 2) or z.shape[-1] != self.input_dim:
            raise ShapeError(f"expected input of length {self.input_dim}, got shape {z.shape}")
        return z

    def predict_proba(self, z) -> np.ndarray:
        z = self._check(z)
        p = self._proba(np.atleast_2d(z))
        return p[0] if z.ndim == 1 else p

    def predict(self, z):
        """Argmax of :meth:`predict_proba`; ties go to the lowest class index."""
        p = self.predict_proba(z)
        return int(np.argmax(p)) if p.ndim == 1 else np.argmax(p, axis=1)

    def _proba(self, z):
        raise NotImplementedError


@dataclass
class NetworkModel(ServiceModel):
    """Softmax regression (a single affine layer) or an MLP with softmax output."""

    kind: str
    layers: list
    num_classes: int
    input_dim: int
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 2:
            raise DomainError("a service model needs at least 2 classes")
        nn.check_chain(self.layers, self.input_dim)
        if self.layers[-1].fan_out != self.num_classes:
            raise DomainError("output width differs from num_classes")

    def _proba(self, z):
        return nn.softmax(nn.forward(self.layers, z))


@dataclass
class DecisionTree:
    """Flat array CART tree. ``left[i] == -1`` marks a leaf; ``value`` holds class counts."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.shape[0]

    def validate(self, input_dim: int) -> None:
        n = self.node_count
        internal = self.left >= 0
        if np.any(self.feature[internal] >= input_dim) or np.any(self.feature[internal] < 0):
            raise DomainError("tree feature index out of range")
        # children always come after their parent, which rules out cycles
        ids = np.arange(n)
        if np.any(self.left[internal] <= ids[internal]) or np.any(self.right[internal] <= ids[internal]):
            raise DomainError("tree is not topologically ordered")
        if np.any(self.left[internal] >= n) or np.any(self.right[internal] >= n):
            raise DomainError("tree child index out of range")

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            active = self.left[node] >= 0
            if not active.any():
                return node
            r = rows[active]
            nd = node[active]
            go_left = x[r, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        counts = self.value[self.leaf_index(x)]
        return counts / counts.sum(axis=1, keepdims=True)


def _best_split(x, y, idx, features, num_classes, min_leaf):
    """Best Gini split of ``idx`` over ``features``; None when nothing separates."""
    vals = x[np.ix_(idx, features)]
    order = np.argsort(vals, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(vals, order, axis=0)
    sorted_y = y[idx][order]
    n = idx.shape[0]
    onehot = np.zeros((n, len(features), num_classes))
    np.put_along_axis(onehot, sorted_y[..., None], 1.0, axis=2)
    left = np.cumsum(onehot, axis=0)[:-1]  # left counts when splitting after position i
    total = left[-1] + onehot[-1]
    right = total - left
    n_left = np.arange(1, n)[:, None].astype(np.float64)
    n_right = n - n_left
    gini_l = n_left - np.sum(left * left, axis=2) / n_left
    gini_r = n_right - np.sum(right * right, axis=2) / n_right
    impurity = (gini_l + gini_r) / n  # weighted Gini of the two children
    valid = sorted_vals[:-1] < sorted_vals[1:]
    if min_leaf > 1:
        valid &= (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    impurity = np.where(valid, impurity, np.inf)
    pos, col = np.unravel_index(np.argmin(impurity), impurity.shape)
    lo, hi = sorted_vals[pos, col], sorted_vals[pos + 1, col]
    thr = 0.5 * (lo + hi)
    if not lo <= thr < hi:
        thr = lo
    return int(features[col]), float(thr)


def grow_tree(x, y, num_classes, *, max_depth, max_features, rng, min_samples_leaf=1) -> DecisionTree:
    m = x.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(np.bincount(y[idx], minlength=num_classes).astype(np.float64))
        return len(feature) - 1

    stack = [(new_node(np.arange(x.shape[0])), np.arange(x.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = value[node]
        if depth >= max_depth or np.count_nonzero(counts) <= 1 or idx.shape[0] < 2 * min_samples_leaf:
            continue
        feats = rng.choice(m, size=min(max_features, m), replace=False)
        split = _best_split(x, y, idx, feats, num_classes, min_samples_leaf)
        if split is None:
            continue
        f, thr = split
        mask = x[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(value).reshape(len(value), num_classes))


@dataclass
class RandomForest(ServiceModel):
    trees: list
    num_classes: int
    input_dim: int
    kind: str = "random_forest"

    def __post_init__(self):
        if self.num_classes < 2:
            raise DomainError("a service model needs at least 2 classes")
        for t in self.trees:
            t.validate(self.input_dim)

    def _proba(self, z):
        per_tree = np.stack([t.predict_proba(z) for t in self.trees])
        # sorting over the tree axis makes the sum independent of tree order
        return np.sort(per_tree, axis=0).sum(axis=0) / len(self.trees)


def _standardize(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (x - mu) / sd, mu, sd


def _fold_standardization(first: nn.Layer, mu, sd) -> None:
    # (x - mu)/sd @ W + b  ==  x @ (W/sd) + (b - (mu/sd) @ W)
    w = first.weight / sd[:, None]
    first.bias = first.bias - (mu / sd) @ first.weight
    first.weight = w


def train_service_model(latents, labels, kind="softmax_regression", cfg: ServiceConfig | None = None,
                        num_classes: int | None = None) -> ServiceModel:
    cfg = cfg or ServiceConfig()
    kind = canonical_kind(kind)
    x = as_matrix(latents, "latents")
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise ShapeError("need one label per row")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DomainError("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise DomainError("labels must be non-negative")
    if num_classes is None:
        num_classes = int(y.max()) + 1
    elif y.max() >= num_classes:
        raise DomainError(f"label {int(y.max())} outside [0, {num_classes})")
    if num_classes < 2 or np.unique(y).size < 2:
        raise DomainError("training data must contain at least 2 classes")
    if x.shape[0] < num_classes:
        raise DomainError("need at least as many samples as classes")
    n, m = x.shape

    if kind == "random_forest":
        max_features = cfg.max_features or math.ceil(math.sqrt(m))
        trees = []
        for i in range(cfg.n_trees):
            tree_rng = make_rng(cfg.seed, 0xF0, i + 1)
            idx = tree_rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
            trees.append(grow_tree(x[idx], y[idx], num_classes, max_depth=cfg.max_depth,
                                   max_features=max_features, rng=tree_rng,
                                   min_samples_leaf=cfg.min_samples_leaf))
        return RandomForest(trees, num_classes, m)

    xs, mu, sd = _standardize(x)
    rng = make_rng(cfg.seed, 0x5E, 0)
    if kind == "softmax_regression":
        layers = [nn.Layer(np.zeros((m, num_classes)), np.zeros(num_classes), "linear")]
        trace = nn.fit(layers, xs, y, loss="xent", epochs=cfg.lr_steps, batch_size=n,
                       optimizer=nn.Optimizer("sgd", cfg.lr_learning_rate), rng=rng, l2=cfg.lr_l2)
    else:
        layers = nn.build_stack(rng, (m, *cfg.hidden, num_classes))
        trace = nn.fit(layers, xs, y, loss="xent", epochs=cfg.epochs,
                       batch_size=min(cfg.batch_size, n),
                       optimizer=nn.Optimizer(cfg.optimizer, cfg.learning_rate),
                       rng=make_rng(cfg.seed, 0x5E, 1))
    _fold_standardization(layers[0], mu, sd)
    return NetworkModel(kind, layers, num_classes, m, trace)


def predict(model: ServiceModel, z) -> int:
    return model.predict(z)


def predict_proba(model: ServiceModel, z) -> np.ndarray:
    return model.predict_proba(z)
