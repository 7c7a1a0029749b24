"""End-to-end experiment: train, calibrate, simulate sessions, score every detector.

Benign sessions sample the test split; adversarial sessions are half
output-diversity (uniform random) and half decision-boundary (perturbed seed)
attacks. Every detector sees exactly the same query streams.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, baselines
from . import detector as det
from .autoencoder import TrainConfig, train_autoencoder
from .data import (DatasetSplit, SyntheticConfig, find_har_dir, ingest_csv, load_uci_har,
                   synthetic_splits)
from .errors import DomainError, LeakGuardError
from .numeric import make_rng
from .service_models import ServiceConfig, canonical_kind, train_service_model

# sub-stream tags for make_rng
TAG_SPLIT, TAG_BENIGN, TAG_ADV, TAG_COIN, TAG_CAL = 0x51, 0xB1, 0xAD, 0xC0, 0xCA

METRIC_COLUMNS = ("method", "t", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall")
ATTACK_COLUMNS = ("session", "kind", "metric", "value")
LONG_COLUMNS = ("group", "t", "component", "mean", "std", "n")
TIMING_COLUMNS = ("t", "component", "mean_us", "median_us")
METHODS = ("soda", "random", "magnet", "prada")

class StageError(LeakGuardError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    dataset: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    rescale: bool = False
    model: str = "lr"
    alpha: float = 0.33
    beta: float = 0.33
    gamma: float = 0.33
    delta: float = 0.2
    horizon: int = 50
    max_horizon: int | None = None  # calibrated horizon; defaults to ``horizon``
    n_benign: int = 100
    n_adversaries: int = 100
    epsilon: float = 0.01
    a1_fraction: float = 1.0
    seed: int = 0
    holdout_fraction: float = 0.2
    calibration_sessions: int = 100
    autoencoder: dict = field(default_factory=dict)
    service: dict = field(default_factory=dict)
    magnet_threshold: float | None = None
    magnet_fit: str = "holdout"  # holdout: calibration rows; benign: train + test splits
    prada_threshold: float = 0.95
    ever_flagged: bool = False
    parallel: bool = False
    include_timing: bool = False

    def __post_init__(self):
        self.model = canonical_kind(self.model)
        if self.horizon < 1:
            raise DomainError("horizon must be at least 1")
        if self.n_benign < 0 or self.n_adversaries < 0:
            raise DomainError("session counts must be non-negative")
        if not 0 < self.holdout_fraction < 1:
            raise DomainError("holdout_fraction must lie in (0, 1)")
        if self.magnet_fit not in ("benign", "holdout"):
            raise DomainError("magnet_fit must be 'holdout' or 'benign'")
        if self.max_horizon is not None and self.max_horizon < self.horizon:
            raise DomainError("max_horizon must cover the evaluation horizon")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DomainError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def detector_config(self) -> det.DetectorConfig:
        return det.DetectorConfig.from_weights(self.alpha, self.beta, self.gamma, self.delta,
                                               self.max_horizon or self.horizon)

    def ae_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.autoencoder})

    def service_config(self) -> ServiceConfig:
        return ServiceConfig(**{"seed": self.seed, **self.service})


# -- data ---------------------------------------------------------------------

def load_dataset(name: str, *, seed=0, synthetic=None, rescale=False):
    """``synthetic`` | ``synthetic-small`` | ``har`` | ``har:<dir>`` | a directory
    with ``train.csv`` and ``test.csv``."""
    overrides = dict(synthetic or {})
    if name in ("synthetic", "synthetic-small"):
        base = SyntheticConfig.har_like(seed) if name == "synthetic" else SyntheticConfig.small(seed)
        cfg = SyntheticConfig(**{**asdict(base), **overrides})
        return synthetic_splits(cfg)
    if name == "har" or name.startswith("har:"):
        root = find_har_dir(name[4:] or None)
        if root is None:
            raise DomainError("UCI HAR data not found; pass har:<dir> or set LEAKGUARD_HAR_DIR")
        return load_uci_har(root)
    root = Path(name)
    if not (root / "train.csv").exists() or not (root / "test.csv").exists():
        raise DomainError(f"{name}: expected a directory with train.csv and test.csv")
    train = ingest_csv(root / "train.csv", rescale=rescale, split="train")
    test = ingest_csv(root / "test.csv", rescale=rescale, feature_ranges=train.feature_ranges,
                      num_classes=train.num_classes, split="test")
    return train, test


def split_holdout(train: DatasetSplit, fraction: float, seed: int):
    """(fit, holdout): the holdout is never seen by training and serves as the
    benign reference for calibration and the reconstruction threshold."""
    perm = make_rng(seed, TAG_SPLIT).permutation(train.n)
    cut = train.n - max(1, int(round(fraction * train.n)))
    return train.subset(np.sort(perm[:cut])), train.subset(np.sort(perm[cut:]))


# -- metrics ------------------------------------------------------------------

def confusion(truth, flagged) -> dict:
    truth = np.asarray(truth, dtype=bool)
    flagged = np.asarray(flagged, dtype=bool)
    tp = int(np.sum(truth & flagged))
    fp = int(np.sum(~truth & flagged))
    tn = int(np.sum(~truth & ~flagged))
    fn = int(np.sum(truth & ~flagged))
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn, **rates(tp, fp, tn, fn)}


def rates(tp, fp, tn, fn) -> dict:
    """Accuracy, precision and recall from counts. With no flagged sessions
    precision is 1 by convention; with no adversaries recall is None."""
    total = tp + fp + tn + fn
    return {
        "accuracy": (tp + tn) / total if total else None,
        "precision": tp / (tp + fp) if tp + fp else 1.0,
        "recall": tp / (tp + fn) if tp + fn else None,
    }


# -- report -------------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: dict = field(default_factory=dict)
    pool: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)  # dicts with METRIC_COLUMNS
    trajectories: list = field(default_factory=list)  # per session and t
    attack_rows: list = field(default_factory=list)  # dicts with ATTACK_COLUMNS
    leakage_long: list = field(default_factory=list)  # dicts with LONG_COLUMNS
    timing: list = field(default_factory=list)  # dicts with TIMING_COLUMNS
    # trained objects for further analysis; never written by emit_report
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    def metric(self, method: str, t: int | None = None) -> dict:
        t = t or self.config.get("horizon")
        for row in self.metrics:
            if row["method"] == method and row["t"] == t:
                return row
        raise KeyError((method, t))


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else r[c] for c in columns])


def emit_report(report: ExperimentReport, out_dir) -> None:
    """metrics.csv, attacks.csv, leakage_long.csv, timing.csv,
    trajectories.jsonl and summary.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, report.metrics)
    _write_csv(out / "attacks.csv", ATTACK_COLUMNS, report.attack_rows)
    _write_csv(out / "leakage_long.csv", LONG_COLUMNS, report.leakage_long)
    _write_csv(out / "timing.csv", TIMING_COLUMNS, report.timing)
    with open(out / "trajectories.jsonl", "w") as fh:
        for rec in report.trajectories:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "summary.json", "w") as fh:
        json.dump({"config": report.config, "pool": report.pool, **report.summary}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


# -- sessions -----------------------------------------------------------------

@dataclass
class Session:
    index: int
    kind: str  # benign | random_query | perturbation
    queries: np.ndarray
    attack: attacks.AttackResult | None = None

    @property
    def adversarial(self) -> bool:
        return self.kind != "benign"


def build_sessions(test: DatasetSplit, target, cfg: PipelineConfig) -> list:
    """Benign sessions first, then adversaries (A-1 for the first half, A-2 after)."""
    H = cfg.horizon
    if cfg.n_benign and test.n < H:
        raise DomainError(f"test split has {test.n} rows, fewer than horizon {H}")
    sessions = []
    for i in range(cfg.n_benign):
        idx = make_rng(cfg.seed, TAG_BENIGN, i).choice(test.n, size=H, replace=False)
        sessions.append(Session(len(sessions), "benign", test.features[idx]))
    n_a1 = math.ceil(cfg.n_adversaries / 2)
    a1 = attacks.AttackConfig(attacks.RANDOM_QUERY, H, feature_subset_fraction=cfg.a1_fraction,
                              seed=cfg.seed)
    a2 = attacks.AttackConfig(attacks.PERTURBATION, H, noise_bound=cfg.epsilon, seed=cfg.seed)
    for j in range(cfg.n_adversaries):
        rng = make_rng(cfg.seed, TAG_ADV, j)
        seed_q = attacks.select_seeds(test, 1, rng)[0]
        if j < n_a1:
            res = attacks.attack_output_diversity(target, a1, rng, seed_q)
        else:
            res = attacks.attack_decision_boundary(target, seed_q, a2, rng)
        sessions.append(Session(len(sessions), res.config.kind, res.queries, res))
    return sessions


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (LeakGuardError, ValueError, OSError) as e:
        raise StageError(name, e) from e


def run_pipeline(cfg: PipelineConfig) -> ExperimentReport:
    train, test = _stage("load", load_dataset, cfg.dataset, seed=cfg.seed,
                         synthetic=cfg.synthetic, rescale=cfg.rescale)
    fit, holdout = _stage("split", split_holdout, train, cfg.holdout_fraction, cfg.seed)
    ae = _stage("train-autoencoder", train_autoencoder, fit.features, cfg.ae_config())
    svc = _stage("train-service", train_service_model, ae.encode(fit.features), fit.labels,
                 cfg.model, cfg.service_config(), train.num_classes)
    dcfg = _stage("config", cfg.detector_config)
    cal = _stage("calibrate", det.calibrate, holdout, ae, svc, dcfg, cfg.calibration_sessions,
                 make_rng(cfg.seed, TAG_CAL))
    magnet_thr = cfg.magnet_threshold
    if magnet_thr is None:
        benign = holdout.features
        if cfg.magnet_fit == "benign":
            benign = np.vstack([train.features, test.features])
        magnet_thr = baselines.fit_magnet_threshold(benign, ae)
    target = attacks.Target(svc, ae)
    sessions = _stage("attack", build_sessions, test, target, cfg)
    report = _stage("detect", _evaluate, cfg, dcfg, ae, svc, cal, magnet_thr, sessions,
                  {"service_test_accuracy": float(np.mean(target.predict(test.features) == test.labels)),
                   "autoencoder_holdout_mse": float(np.mean(ae.reconstruction_mse(holdout.features))),
                   "magnet_threshold": magnet_thr,
                   "split_sizes": {"fit": fit.n, "holdout": holdout.n, "test": test.n},
                   "dims": {"k": ae.input_dim, "m": ae.latent_dim, "C": svc.num_classes}})
    report.artifacts = {"ae": ae, "service": svc, "calibration": cal, "detector": dcfg,
                        "train": train, "test": test, "holdout": holdout, "sessions": sessions,
                        "magnet_threshold": magnet_thr}
    return report


def _evaluate(cfg, dcfg, ae, svc, cal, magnet_thr, sessions, summary) -> ExperimentReport:
    H = cfg.horizon
    n = len(sessions)
    truth = np.array([s.adversarial for s in sessions], dtype=bool)
    flags = {m: np.zeros((n, H), dtype=bool) for m in METHODS}
    comp = np.zeros((n, 4, H))  # norm r, d, o and l
    timing = np.zeros((n, 3, H))
    trajectories = []
    for s in sessions:
        _, steps = det.run_session(s.queries, ae, svc, dcfg, cal, parallel=cfg.parallel)
        for b in steps:
            rec = b.to_record()
            if not cfg.include_timing:
                del rec["timing_us"]
            trajectories.append({"session": s.index, "kind": s.kind, **rec})
            comp[s.index, :, b.t - 1] = (b.norm_r, b.norm_d, b.norm_o, b.l)
            timing[s.index, :, b.t - 1] = [b.timing_us[c] for c in det.COMPONENTS]
        flags["soda"][s.index] = [b.verdict == det.ADVERSARIAL for b in steps]
        mse = ae.reconstruction_mse(s.queries)
        flags["magnet"][s.index] = np.maximum.accumulate(mse > magnet_thr)
        mins = baselines.min_distance_stream(s.queries)
        flags["prada"][s.index] = [
            t >= 3 and baselines.shapiro_w(mins[:t]) < cfg.prada_threshold for t in range(1, H + 1)
        ]
        flags["random"][s.index] = baselines.random_detector(make_rng(cfg.seed, TAG_COIN, s.index)).flagged
    if cfg.ever_flagged:
        flags["soda"] = np.maximum.accumulate(flags["soda"], axis=1)

    metrics = []
    for m in METHODS:
        for t in range(1, H + 1):
            metrics.append({"method": m, "t": t, **confusion(truth, flags[m][:, t - 1])})

    kinds = [s.kind for s in sessions]
    long_rows = []
    ref = cal.reference_curve(dcfg)[:H]
    for t in range(1, H + 1):
        long_rows.append({"group": "reference", "t": t, "component": "l", "mean": float(ref[t - 1]),
                          "std": 0.0, "n": cal.sessions})
    for group in ("benign", attacks.RANDOM_QUERY, attacks.PERTURBATION):
        rows = np.array([k == group for k in kinds])
        if not rows.any():
            continue
        for ci, cname in enumerate(("r", "d", "o", "l")):
            vals = comp[rows, ci, :]
            for t in range(1, H + 1):
                long_rows.append({"group": group, "t": t, "component": cname,
                                  "mean": float(vals[:, t - 1].mean()),
                                  "std": float(vals[:, t - 1].std()), "n": int(rows.sum())})

    timing_rows = []
    if cfg.include_timing and n:
        for ci, cname in enumerate(det.COMPONENTS):
            for t in range(1, H + 1):
                timing_rows.append({"t": t, "component": cname,
                                    "mean_us": float(timing[:, ci, t - 1].mean()),
                                    "median_us": float(np.median(timing[:, ci, t - 1]))})

    attack_rows = []
    for s in sessions:
        if s.attack is None:
            continue
        if s.kind == attacks.RANDOM_QUERY:
            attack_rows.append({"session": s.index, "kind": s.kind, "metric": "classes_recovered_fraction",
                                "value": s.attack.classes_recovered_fraction})
        else:
            attack_rows.append({"session": s.index, "kind": s.kind, "metric": "exploitation_accuracy",
                                "value": s.attack.exploitation_accuracy})

    pool = {"benign": int(np.sum(~truth)), "random_query": kinds.count(attacks.RANDOM_QUERY),
            "perturbation": kinds.count(attacks.PERTURBATION), "horizon": H}
    config = asdict(cfg)
    report = ExperimentReport(config, pool, summary, metrics, trajectories, attack_rows,
                              long_rows, timing_rows)
    report.summary["headline"] = {m: report.metric(m, H) for m in METHODS}
    return report


def format_table(report: ExperimentReport, t: int | None = None) -> str:
    t = t or report.config.get("horizon")
    lines = [f"pool: {report.pool}", f"{'method':<8} {'acc':>7} {'prec':>7} {'recall':>7}   tp  fp  tn  fn"]
    for m in METHODS:
        try:
            r = report.metric(m, t)
        except KeyError:
            continue
        fmt = lambda v: "   null" if v is None else f"{100 * v:7.2f}"
        lines.append(f"{m:<8} {fmt(r['accuracy'])} {fmt(r['precision'])} {fmt(r['recall'])} "
                     f"{r['tp']:4d}{r['fp']:4d}{r['tn']:4d}{r['fn']:4d}")
    return "\n".join(lines)
