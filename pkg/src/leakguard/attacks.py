"""Query-based attacks against a deployed classifier.

* output diversity (A-1): uniform random queries, measuring how many of the
  C classes the model can be made to emit;
* decision boundary (A-2): small uniform perturbations of an organic seed
  query, measuring how often the seed's class survives.

A black-box surface is modelled as a wider input vector whose extra columns
the target ignores; the attacker still pays to generate them.
"""
from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial.distance import pdist

from .errors import DomainError, ShapeError
from .numeric import make_rng, uniform

RANDOM_QUERY = "random_query"
PERTURBATION = "perturbation"
WHITE_BOX = "white_box"
BLACK_BOX = "black_box"

SWEEP_COLUMNS = ("kind", "surface", "num_queries", "epsilon", "feature_fraction", "extra_features",
                 "metric", "value", "wall_time_us", "seed")


@dataclass
class AttackConfig:
    kind: str = RANDOM_QUERY
    num_queries: int = 100
    noise_bound: float = 0.01
    feature_subset_fraction: float = 1.0
    surface: str = WHITE_BOX
    extra_unused_features: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (RANDOM_QUERY, PERTURBATION):
            raise DomainError(f"unknown attack kind {self.kind!r}")
        if self.num_queries < 1:
            raise DomainError("num_queries must be at least 1")
        if self.kind == PERTURBATION and not self.noise_bound > 0:
            raise DomainError("perturbation attacks need a positive noise bound")
        if not 0 < self.feature_subset_fraction <= 1:
            raise DomainError("feature_subset_fraction must lie in (0, 1]")
        if self.surface not in (WHITE_BOX, BLACK_BOX):
            raise DomainError(f"unknown surface {self.surface!r}")
        if self.extra_unused_features < 0:
            raise DomainError("extra_unused_features must be non-negative")
        if self.extra_unused_features and self.surface != BLACK_BOX:
            raise DomainError("extra unused features only exist on the black-box surface")


class Target:
    """A prediction function over ``input_dim`` features.

    ``model`` is any service model; with ``encoder`` the target is the
    end-to-end pipeline ``model(encoder(x))``.
    """

    def __init__(self, model, encoder=None, name=""):
        self.model = model
        self.encoder = encoder
        self.name = name or getattr(model, "kind", "target")
        self.num_classes = model.num_classes
        self.input_dim = encoder.input_dim if encoder is not None else model.input_dim

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] < self.input_dim:
            raise ShapeError(f"queries have {x.shape[1]} features, target needs {self.input_dim}")
        # columns past input_dim are the black-box surface's unused features
        x = x[:, : self.input_dim]
        if self.encoder is not None:
            x = self.encoder.encode(x)
        return np.asarray(self.model.predict(x)).reshape(-1)


@dataclass
class AttackResult:
    queries: np.ndarray
    predictions: np.ndarray
    classes_recovered_fraction: float
    exploitation_accuracy: float
    wall_time: float  # seconds spent generating and submitting queries
    seed_class: int | None = None
    successful_spread: float | None = None
    config: AttackConfig = field(default_factory=AttackConfig)

    def recovery_curve(self, num_classes: int) -> np.ndarray:
        """Fraction of classes seen after each query."""
        seen = np.zeros(num_classes, dtype=bool)
        out = np.empty(self.predictions.shape[0])
        for i, y in enumerate(self.predictions):
            seen[y] = True
            out[i] = seen.sum() / num_classes
        return out


def select_seeds(test, n: int, rng, *, return_labels=False):
    """``n`` rows of ``test`` drawn uniformly without replacement."""
    x = np.asarray(getattr(test, "features", test))
    if not 0 < n <= x.shape[0]:
        raise DomainError(f"cannot select {n} seeds from {x.shape[0]} rows")
    idx = rng.choice(x.shape[0], size=n, replace=False)
    if return_labels:
        return x[idx], np.asarray(test.labels)[idx]
    return x[idx]


def _feature_subset(k: int, fraction: float, rng) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(k)
    size = max(1, math.ceil(fraction * k))
    return np.sort(rng.choice(k, size=size, replace=False))


def _surface_queries(base: np.ndarray, cfg: AttackConfig, subset, draw, rng) -> np.ndarray:
    """Fill ``subset`` columns of ``num_queries`` copies of ``base`` via ``draw``, then
    append the unused black-box columns (generated after, so shared columns match
    the white-box draw for the same stream)."""
    n, k = cfg.num_queries, base.shape[0]
    q = np.empty((n, k + cfg.extra_unused_features))
    q[:, :k] = base
    q[:, subset] = draw(n * subset.shape[0]).reshape(n, subset.shape[0])
    if cfg.extra_unused_features:
        q[:, k:] = uniform(rng, -1.0, 1.0, n * cfg.extra_unused_features).reshape(n, -1)
    return q


def attack_output_diversity(target: Target, cfg: AttackConfig, rng, seed_query=None) -> AttackResult:
    """A-1: uniform queries on [-1, 1] over a feature subset; the rest come from ``seed_query``."""
    if cfg.kind != RANDOM_QUERY:
        raise DomainError("attack_output_diversity needs kind='random_query'")
    k = target.input_dim
    if seed_query is None:
        if cfg.feature_subset_fraction < 1.0:
            raise DomainError("a partial feature subset needs a seed query to fill the rest")
        seed_query = np.zeros(k)
    seed_query = np.asarray(seed_query, dtype=np.float64)
    if seed_query.shape != (k,):
        raise ShapeError(f"seed query must have length {k}")
    start = time.perf_counter()
    subset = _feature_subset(k, cfg.feature_subset_fraction, rng)
    q = _surface_queries(seed_query, cfg, subset, lambda n: uniform(rng, -1.0, 1.0, n), rng)
    preds = target.predict(q)
    elapsed = time.perf_counter() - start
    frac = np.unique(preds).size / target.num_classes
    return AttackResult(q, preds, frac, float("nan"), elapsed, config=cfg)


def attack_decision_boundary(target: Target, seed_query, cfg: AttackConfig, rng,
                             seed_class=None) -> AttackResult:
    """A-2: ``seed + U[-eps, eps]`` on a feature subset, clipped to [-1, 1].

    The success reference is the target's own prediction for the seed unless
    ``seed_class`` is given.
    """
    if cfg.kind != PERTURBATION:
        raise DomainError("attack_decision_boundary needs kind='perturbation'")
    k = target.input_dim
    seed_query = np.asarray(seed_query, dtype=np.float64)
    if seed_query.shape != (k,):
        raise ShapeError(f"seed query must have length {k}")
    if seed_class is None:
        seed_class = int(target.predict(seed_query)[0])
    eps = cfg.noise_bound
    start = time.perf_counter()
    subset = _feature_subset(k, cfg.feature_subset_fraction, rng)
    base = seed_query[subset]

    def draw(n):
        noise = uniform(rng, -eps, eps, n).reshape(-1, subset.shape[0])
        return np.clip(base + noise, -1.0, 1.0)

    q = _surface_queries(seed_query, cfg, subset, draw, rng)
    preds = target.predict(q)
    elapsed = time.perf_counter() - start
    hit = preds == seed_class
    spread = float(np.mean(pdist(q[hit, :k]))) if hit.sum() >= 2 else None
    return AttackResult(q, preds, np.unique(preds).size / target.num_classes, float(hit.mean()),
                        elapsed, seed_class, spread, cfg)


def run_attack(target: Target, cfg: AttackConfig, rng, seed_query=None) -> AttackResult:
    if cfg.kind == RANDOM_QUERY:
        return attack_output_diversity(target, cfg, rng, seed_query)
    return attack_decision_boundary(target, seed_query, cfg, rng)


@dataclass
class SweepRow:
    kind: str
    surface: str
    num_queries: int
    epsilon: float
    feature_fraction: float
    extra_features: int
    metric: str
    value: float
    wall_time_us: float
    seed: int


def sweep(grid: dict, target: Target, seed_queries, base: AttackConfig | None = None) -> list:
    """One row per grid cell: the attack metric averaged over ``seed_queries``.

    ``grid`` maps AttackConfig field names to lists of values. Seed query ``i``
    uses the stream ``make_rng(cfg.seed, i)``, so a one-cell grid with one seed
    reproduces a single attack call.
    """
    base = base or AttackConfig()
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise DomainError("sweep needs a non-empty grid")
    names = list(grid)
    valid = {f.name for f in fields(AttackConfig)}
    unknown = set(names) - valid
    if unknown:
        raise DomainError(f"unknown sweep fields {sorted(unknown)}")
    seed_queries = np.atleast_2d(np.asarray(seed_queries, dtype=np.float64))
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        cfg = AttackConfig(**{**asdict(base), **dict(zip(names, values))})
        metric = "classes_recovered_fraction" if cfg.kind == RANDOM_QUERY else "exploitation_accuracy"
        vals, times = [], []
        for i, seed_q in enumerate(seed_queries):
            res = run_attack(target, cfg, make_rng(cfg.seed, i), seed_q)
            vals.append(getattr(res, metric))
            times.append(res.wall_time)
        rows.append(SweepRow(cfg.kind, cfg.surface, cfg.num_queries,
                             cfg.noise_bound if cfg.kind == PERTURBATION else 0.0,
                             cfg.feature_subset_fraction, cfg.extra_unused_features, metric,
                             float(np.mean(vals)), float(np.mean(times)) * 1e6, cfg.seed))
    return rows


def write_sweep_csv(rows, path, *, include_timing=True) -> None:
    """Write sweep rows; with ``include_timing=False`` wall times are blanked so
    the file is reproducible byte for byte."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            d = asdict(r)
            if not include_timing:
                d["wall_time_us"] = ""
            w.writerow([d[c] for c in SWEEP_COLUMNS])
