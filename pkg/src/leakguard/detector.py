"""Per-session leakage-rate detector.

Each query updates three cumulative signals:

* ``r`` -- running sum of autoencoder reconstruction MSE,
* ``d`` -- running sum of the median latent distance from the new query to
  every earlier query of the session,
* ``o`` -- entropy of the session's predicted-class histogram.

Each signal is min-max normalised against benign sessions at the same
timestep, the normalised values are mixed with weights ``alpha, beta, gamma``
and the mix is compared with a band of ±``delta`` around the benign reference.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, HorizonError, ShapeError
from .numeric import entropy_from_counts, make_rng, row_distances

BENIGN = "benign"
ADVERSARIAL = "adversarial"
COMPONENTS = ("r", "d", "o")


@dataclass
class DetectorConfig:
    alpha: float = 1 / 3
    beta: float = 1 / 3
    gamma: float = 1 / 3
    delta: float = 0.2
    max_horizon: int = 500

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0:
            raise DomainError(f"weights must be non-negative, got {w}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise DomainError(f"weights must sum to 1, got {sum(w)!r}")
        if not self.delta > 0:
            raise DomainError("delta must be positive")
        if self.max_horizon < 1:
            raise DomainError("max_horizon must be at least 1")

    @classmethod
    def from_weights(cls, alpha=0.33, beta=0.33, gamma=0.33, delta=0.2, max_horizon=500):
        """Build a config from weights that need not sum to 1 exactly (they are rescaled)."""
        total = alpha + beta + gamma
        if min(alpha, beta, gamma) < 0 or total <= 0:
            raise DomainError("weights must be non-negative with a positive sum")
        return cls(alpha / total, beta / total, gamma / total, delta, max_horizon)

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


class DetectorState:
    """Running values for one user session."""

    def __init__(self, num_classes: int, latent_dim: int):
        if num_classes < 2:
            raise DomainError("need at least 2 classes")
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.t = 0
        self.r_cum = 0.0
        self.d_cum = 0.0
        self.class_counts = np.zeros(num_classes, dtype=np.int64)
        self.verdicts: list[str] = []
        self._history = np.empty((16, latent_dim))
        self._n_hist = 0

    @property
    def encoded_history(self) -> np.ndarray:
        return self._history[: self._n_hist]

    def _append(self, z: np.ndarray) -> None:
        if self._n_hist == self._history.shape[0]:
            grown = np.empty((2 * self._history.shape[0], self.latent_dim))
            grown[: self._n_hist] = self._history[: self._n_hist]
            self._history = grown
        self._history[self._n_hist] = z
        self._n_hist += 1

    def copy(self) -> "DetectorState":
        other = DetectorState(self.num_classes, self.latent_dim)
        other.t, other.r_cum, other.d_cum = self.t, self.r_cum, self.d_cum
        other.class_counts = self.class_counts.copy()
        other.verdicts = list(self.verdicts)
        for z in self.encoded_history:
            other._append(z)
        return other

    def __eq__(self, other):
        if not isinstance(other, DetectorState):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.latent_dim == other.latent_dim
                and self.t == other.t and self.r_cum == other.r_cum and self.d_cum == other.d_cum
                and np.array_equal(self.class_counts, other.class_counts)
                and self.verdicts == other.verdicts
                and np.array_equal(self.encoded_history, other.encoded_history))

    @property
    def verdict(self) -> str | None:
        return self.verdicts[-1] if self.verdicts else None


@dataclass
class CalibrationTable:
    """Benign per-timestep envelope: ``lo``/``hi``/``mean_norm`` are (3, T) arrays
    indexed by component (r, d, o) and timestep t-1."""

    lo: np.ndarray
    hi: np.ndarray
    mean_norm: np.ndarray
    sessions: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.mean_norm = np.asarray(self.mean_norm, dtype=np.float64)
        if not (self.lo.shape == self.hi.shape == self.mean_norm.shape) or self.lo.ndim != 2 \
                or self.lo.shape[0] != 3:
            raise DomainError("calibration arrays must all have shape (3, T)")
        if np.any(self.lo > self.hi):
            raise DomainError("calibration min exceeds max")

    @property
    def horizon(self) -> int:
        return self.lo.shape[1]

    def _col(self, t: int) -> int:
        if not 1 <= t <= self.horizon:
            raise HorizonError(f"timestep {t} outside calibrated horizon 1..{self.horizon}")
        return t - 1

    def reference(self, t: int, cfg: DetectorConfig) -> float:
        """Benign reference leakage at timestep ``t`` for the weights in ``cfg``."""
        return float(cfg.weights @ self.mean_norm[:, self._col(t)])

    def reference_curve(self, cfg: DetectorConfig) -> np.ndarray:
        return cfg.weights @ self.mean_norm


@dataclass
class LeakageBreakdown:
    t: int
    raw_r: float
    raw_d: float
    raw_o: float
    norm_r: float
    norm_d: float
    norm_o: float
    l: float
    verdict: str
    prediction: int = -1
    timing_us: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"t": self.t, "raw_r": self.raw_r, "raw_d": self.raw_d, "raw_o": self.raw_o,
                "norm_r": self.norm_r, "norm_d": self.norm_d, "norm_o": self.norm_o,
                "l": self.l, "verdict": self.verdict,
                "timing_us": {c: self.timing_us.get(c, 0.0) for c in COMPONENTS}}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=False)


# -- component updates --------------------------------------------------------

def update_reconstruction(state: DetectorState, x_t, model) -> float:
    state.r_cum += model.reconstruction_mse(_query(x_t, model.input_dim))
    return state.r_cum


def _distance_increment(history: np.ndarray, z: np.ndarray) -> float:
    if history.shape[0] == 0:
        return 0.0
    return float(np.median(row_distances(history, z)))


def update_distance(state: DetectorState, z_t) -> float:
    """Add the median distance from ``z_t`` to all earlier latents; the first query adds 0."""
    z = np.asarray(z_t, dtype=np.float64)
    if z.shape != (state.latent_dim,):
        raise ShapeError(f"expected latent of length {state.latent_dim}, got shape {z.shape}")
    state.d_cum += _distance_increment(state.encoded_history, z)
    state._append(z)
    return state.d_cum


def record_prediction(state: DetectorState, y: int) -> None:
    if not 0 <= y < state.num_classes:
        raise DomainError(f"class {y} outside [0, {state.num_classes})")
    state.class_counts[y] += 1


def output_entropy(state: DetectorState) -> float:
    """Natural-log entropy of the predicted-class histogram so far."""
    if state.class_counts.sum() == 0:
        raise DomainError("output entropy is undefined before the first query")
    return entropy_from_counts(state.class_counts)


def normalize(value: float, t: int, which: str, cal: CalibrationTable) -> float:
    """Min-max scale against the benign envelope at ``t``; deliberately unclamped."""
    row = COMPONENTS.index(which)
    col = cal._col(t)
    lo, hi = cal.lo[row, col], cal.hi[row, col]
    if hi == lo:
        return 0.0
    return float((value - lo) / (hi - lo))


def leakage_rate(norm_r: float, norm_d: float, norm_o: float, cfg: DetectorConfig) -> float:
    return cfg.alpha * norm_r + cfg.beta * norm_d + cfg.gamma * norm_o


def classify(l_t: float, t: int, cfg: DetectorConfig, cal: CalibrationTable) -> str:
    ref = cal.reference(t, cfg)
    if l_t < ref - cfg.delta * ref or l_t > ref + cfg.delta * ref:
        return ADVERSARIAL
    return BENIGN


# -- streaming ----------------------------------------------------------------

def _query(x, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (k,):
        raise ShapeError(f"expected query of length {k}, got shape {x.shape}")
    return x


def _timed(fn, *args):
    start = time.perf_counter_ns()
    out = fn(*args)
    return out, (time.perf_counter_ns() - start) / 1000.0


def _reconstruction_term(ae, x, z):
    diff = x - ae.decode(z)
    return float(np.sum(diff * diff) / ae.input_dim)


def _entropy_term(counts, y):
    counts = counts.copy()
    counts[y] += 1
    return entropy_from_counts(counts), counts


_POOL: ThreadPoolExecutor | None = None


def _pool() -> ThreadPoolExecutor:
    global _POOL
    if _POOL is None:
        _POOL = ThreadPoolExecutor(max_workers=3, thread_name_prefix="leakage")
    return _POOL


def observe(state: DetectorState, x_t, ae, model, cfg: DetectorConfig, cal: CalibrationTable,
            *, parallel: bool = False) -> LeakageBreakdown:
    """Process one query: encode, predict, update r/d/o, normalise, mix, classify.

    With ``parallel`` the three component computations run on worker threads;
    the state is committed afterwards in one step, so results are identical
    to the sequential path.
    """
    x = _query(x_t, ae.input_dim)
    t = state.t + 1
    cal._col(t)
    z = ae.encode(x)
    y = int(model.predict(z))
    history = state.encoded_history

    if parallel:
        futures = [_pool().submit(_timed, _reconstruction_term, ae, x, z),
                   _pool().submit(_timed, _distance_increment, history, z),
                   _pool().submit(_timed, _entropy_term, state.class_counts, y)]
        (mse, t_r), (inc, t_d), ((entropy, counts), t_o) = (f.result() for f in futures)
    else:
        mse, t_r = _timed(_reconstruction_term, ae, x, z)
        inc, t_d = _timed(_distance_increment, history, z)
        (entropy, counts), t_o = _timed(_entropy_term, state.class_counts, y)

    # commit
    state.r_cum += mse
    state.d_cum += inc
    state._append(z)
    state.class_counts = counts
    state.t = t

    raw = (state.r_cum, state.d_cum, entropy)
    norm = [normalize(v, t, c, cal) for v, c in zip(raw, COMPONENTS)]
    l_t = leakage_rate(*norm, cfg)
    verdict = classify(l_t, t, cfg, cal)
    state.verdicts.append(verdict)
    return LeakageBreakdown(t, *raw, *norm, l_t, verdict, y, {"r": t_r, "d": t_d, "o": t_o})


def run_session(queries, ae, model, cfg, cal, *, state=None, parallel=False):
    """Feed ``queries`` through one session; returns (state, [LeakageBreakdown, ...])."""
    state = state or DetectorState(model.num_classes, ae.latent_dim)
    return state, [observe(state, q, ae, model, cfg, cal, parallel=parallel) for q in queries]


# -- calibration --------------------------------------------------------------

def component_trajectories(mse: np.ndarray, latents: np.ndarray, preds: np.ndarray,
                           num_classes: int) -> np.ndarray:
    """Raw (r, d, o) trajectories, shape (3, T), for a session given per-query values."""
    T = mse.shape[0]
    out = np.empty((3, T))
    out[0] = np.cumsum(mse)
    inc = np.zeros(T)
    for i in range(1, T):
        inc[i] = np.median(row_distances(latents[:i], latents[i]))
    out[1] = np.cumsum(inc)
    counts = np.cumsum(np.eye(num_classes)[preds], axis=0)
    p = counts / np.arange(1, T + 1)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    out[2] = -terms.sum(axis=1)
    return out


def normalize_trajectories(raw: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize` over (..., 3, T) arrays."""
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (raw - lo) / safe, 0.0)


def calibrate(train, ae, model, cfg: DetectorConfig, sessions: int = 100, rng=None) -> CalibrationTable:
    """Benign envelope from ``sessions`` simulated sessions of length ``cfg.max_horizon``.

    Each session samples queries uniformly without replacement from ``train``
    (a DatasetSplit or a feature matrix).
    """
    x = np.asarray(getattr(train, "features", train), dtype=np.float64)
    T = cfg.max_horizon
    if sessions < 2:
        raise DomainError("calibration needs at least 2 sessions")
    if x.shape[0] < T:
        raise DomainError(f"training set has {x.shape[0]} rows, fewer than horizon {T}")
    rng = rng if rng is not None else make_rng(0, 0xCA1)
    z_all = ae.encode(x)
    diff = x - ae.decode(z_all)
    mse_all = np.sum(diff * diff, axis=1) / ae.input_dim
    pred_all = np.asarray(model.predict(z_all))
    raw = np.empty((sessions, 3, T))
    for b in range(sessions):
        idx = rng.choice(x.shape[0], size=T, replace=False)
        raw[b] = component_trajectories(mse_all[idx], z_all[idx], pred_all[idx], model.num_classes)
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    mean_norm = normalize_trajectories(raw, lo, hi).mean(axis=0)
    return CalibrationTable(lo, hi, mean_norm, sessions)


def entropy_bound(num_classes: int) -> float:
    return math.log(num_classes)
