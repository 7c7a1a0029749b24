"""Reference session detectors to compare the leakage detector against.

* random: a fair coin per session;
* magnet: flag a session once any query reconstructs worse than a threshold;
* prada: flag a session whose minimum-distance stream fails a Shapiro-Wilk
  normality test.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import shapiro

from .detector import ADVERSARIAL, BENIGN
from .errors import DomainError
from .numeric import row_distances

METHODS = ("random", "magnet", "prada")


@dataclass
class BaselineVerdict:
    method: str
    verdict: str
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise DomainError(f"{self.method} score is not finite")

    @property
    def flagged(self) -> bool:
        return self.verdict == ADVERSARIAL

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "verdict": self.verdict, "score": self.score})


def random_detector(rng) -> BaselineVerdict:
    u = float(rng.random())
    return BaselineVerdict("random", ADVERSARIAL if u < 0.5 else BENIGN, u)


def fit_magnet_threshold(benign_features, ae) -> float:
    """Largest reconstruction error seen on benign data."""
    x = np.atleast_2d(np.asarray(benign_features, dtype=np.float64))
    if x.shape[0] == 0:
        raise DomainError("need benign data to fit a threshold")
    return float(np.max(ae.reconstruction_mse(x)))


def magnet_detector(queries, ae, threshold: float) -> BaselineVerdict:
    """Adversarial iff some query's reconstruction MSE exceeds ``threshold``.
    The score is the worst error seen."""
    if not threshold > 0:
        raise DomainError("threshold must be positive")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    worst = float(np.max(ae.reconstruction_mse(q))) if q.shape[0] else 0.0
    return BaselineVerdict("magnet", ADVERSARIAL if worst > threshold else BENIGN, worst)


def min_distance_stream(queries) -> np.ndarray:
    """Distance from each query to its nearest predecessor; the first entry is 0."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.zeros(q.shape[0])
    for i in range(1, q.shape[0]):
        out[i] = np.min(row_distances(q[:i], q[i]))
    return out


def shapiro_w(values) -> float:
    """Shapiro-Wilk W; a constant sample has no spread to test and scores 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        raise DomainError("Shapiro-Wilk needs at least 3 values")
    if np.ptp(v) == 0:
        return 0.0
    return float(shapiro(v).statistic)


def prada_detector(queries, detection_threshold: float = 0.95) -> BaselineVerdict:
    """Adversarial iff W of the minimum-distance stream is below the threshold.

    Fewer than 3 queries cannot be tested; the session is reported benign
    with score 1.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[0] < 3:
        return BaselineVerdict("prada", BENIGN, 1.0)
    w = shapiro_w(min_distance_stream(q))
    return BaselineVerdict("prada", ADVERSARIAL if w < detection_threshold else BENIGN, w)
