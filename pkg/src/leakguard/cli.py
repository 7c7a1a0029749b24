"""Command-line entry point.

    leakguard synth --out data/
    leakguard train --dataset data/ --model lr --out model.sodm
    leakguard calibrate --bundle model.sodm --queries 50
    leakguard detect --bundle model.sodm --input queries.csv --state-file s.sodx --sync-dir sync/
    leakguard attack --model rf --queries 100 --out a1.csv
    leakguard evaluate --model lr --out report/
    leakguard report --out report/

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import attacks, baselines
from . import detector as det
from . import persistence as store
from .autoencoder import train_autoencoder
from .data import SyntheticConfig, synthetic_splits, write_csv
from .errors import LeakGuardError
from .numeric import make_rng
from .pipeline import (METHODS, PipelineConfig, emit_report, format_table, load_dataset,
                       run_pipeline, split_holdout)
from .service_models import SHORT_NAMES, train_service_model

COMMANDS = ("train", "calibrate", "attack", "detect", "evaluate", "report", "synth")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file whose keys mirror these flags")
    p.add_argument("--dataset", default="synthetic",
                   help="synthetic, synthetic-small, har[:dir], or a dir with train.csv/test.csv")
    p.add_argument("--rescale", action="store_true", help="min-max rescale CSV features to [-1, 1]")
    p.add_argument("--model", default="lr", choices=sorted(SHORT_NAMES.values()))
    p.add_argument("--alpha", type=float, default=0.33)
    p.add_argument("--beta", type=float, default=0.33)
    p.add_argument("--gamma", type=float, default=0.33)
    p.add_argument("--delta", type=float, default=0.2)
    p.add_argument("--queries", type=int, help="queries per session / attack (horizon)")
    p.add_argument("--adversaries", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sync-dir", help="directory receiving sealed state copies")
    p.add_argument("--out", help="output file or directory")
    return p


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="leakguard", description="Detect query-based model extraction on device.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    sub.add_parser("synth", parents=[common], help="write a synthetic train/test CSV pair")

    sub.add_parser("train", parents=[common], help="train autoencoder + service model into a bundle")

    p = sub.add_parser("calibrate", parents=[common], help="add the benign calibration table to a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--sessions", type=int, default=100)

    p = sub.add_parser("attack", parents=[common], help="run an attack sweep against a raw-feature model")
    p.add_argument("--kind", choices=(attacks.RANDOM_QUERY, attacks.PERTURBATION), default=attacks.RANDOM_QUERY)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--fraction", type=float, default=1.0, help="fraction of features attacked")
    p.add_argument("--extra-features", type=int, default=0, help="black-box unused features")
    p.add_argument("--seeds", type=int, default=100, help="number of organic seed queries")
    p.add_argument("--grid", help='JSON sweep grid, e.g. \'{"num_queries": [10, 100, 1000]}\'')
    p.add_argument("--timing", action="store_true", help="keep wall times in the CSV")

    p = sub.add_parser("detect", parents=[common], help="stream a CSV of queries through the detector")
    p.add_argument("--bundle", required=True)
    p.add_argument("--input", required=True, help="CSV of queries (a label column is ignored)")
    p.add_argument("--state-file", help="sealed session state, resumed if present")
    p.add_argument("--sync-every", type=int, default=store.DEFAULT_SYNC_EVERY)
    p.add_argument("--parallel", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="full benign vs adversarial comparison")
    p.add_argument("--benign", type=int, default=100)
    p.add_argument("--sessions", type=int, default=100, help="calibration sessions")
    p.add_argument("--magnet-fit", choices=("holdout", "benign"), default="holdout")
    p.add_argument("--ever-flagged", action="store_true")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--timing", action="store_true", help="record per-component timings")

    sub.add_parser("report", parents=[common], help="print the metrics of an emitted report")
    return parser


def _apply_config(parser, args, argv):
    """Re-parse with defaults taken from ``--config``; returns pipeline-only extras."""
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    flags = {k: v for k, v in cfg.items() if k in dests}
    extras = {k: v for k, v in cfg.items() if k not in dests}
    unknown = set(extras) - set(PipelineConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    sub.set_defaults(**flags)
    return extras, parser.parse_args(argv)


def _pipeline_config(args, extras) -> PipelineConfig:
    fields = dict(dataset=args.dataset, rescale=args.rescale, model=args.model, alpha=args.alpha,
                  beta=args.beta, gamma=args.gamma, delta=args.delta, seed=args.seed,
                  n_adversaries=args.adversaries)
    if args.queries is not None:
        fields["horizon"] = args.queries
    for flag, key in (("benign", "n_benign"), ("sessions", "calibration_sessions"),
                      ("magnet_fit", "magnet_fit"), ("ever_flagged", "ever_flagged"),
                      ("parallel", "parallel"), ("timing", "include_timing")):
        if hasattr(args, flag):
            fields[key] = getattr(args, flag)
    return PipelineConfig.from_dict({**fields, **extras})


def cmd_synth(args, extras):
    if not args.out:
        raise UsageError("synth needs --out DIR")
    base = SyntheticConfig.small(args.seed) if args.dataset == "synthetic-small" else SyntheticConfig.har_like(args.seed)
    cfg = SyntheticConfig.from_dict({**base.__dict__, **extras.get("synthetic", {})})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = synthetic_splits(cfg)
    write_csv(train, out / "train.csv")
    write_csv(test, out / "test.csv")
    print(f"wrote {train.n} train and {test.n} test rows with k={train.k}, C={train.num_classes} to {out}")


def _train_bundle(pcfg: PipelineConfig):
    train, test = load_dataset(pcfg.dataset, seed=pcfg.seed, synthetic=pcfg.synthetic, rescale=pcfg.rescale)
    fit, holdout = split_holdout(train, pcfg.holdout_fraction, pcfg.seed)
    ae = train_autoencoder(fit.features, pcfg.ae_config())
    svc = train_service_model(ae.encode(fit.features), fit.labels, pcfg.model, pcfg.service_config(),
                              train.num_classes)
    bundle = store.ModelBundle(ae, svc, pcfg.detector_config(), feature_ranges=train.feature_ranges,
                               dataset=pcfg.dataset)
    return bundle, train, test, holdout


def cmd_train(args, extras):
    pcfg = _pipeline_config(args, extras)
    bundle, _, test, _ = _train_bundle(pcfg)
    out = Path(args.out or "model.sodm")
    store.save_bundle(bundle, out)
    acc = np.mean(attacks.Target(bundle.service, bundle.ae).predict(test.features) == test.labels)
    print(f"saved {out}: k={bundle.ae.input_dim} m={bundle.ae.latent_dim} model={bundle.service.kind} "
          f"test accuracy {acc:.4f}")


def cmd_calibrate(args, extras):
    pcfg = _pipeline_config(args, extras)
    bundle = store.load_bundle(args.bundle)
    train, _ = load_dataset(pcfg.dataset, seed=pcfg.seed, synthetic=pcfg.synthetic, rescale=pcfg.rescale)
    _, holdout = split_holdout(train, pcfg.holdout_fraction, pcfg.seed)
    bundle.detector = pcfg.detector_config()
    bundle.calibration = det.calibrate(holdout, bundle.ae, bundle.service, bundle.detector,
                                       args.sessions, make_rng(pcfg.seed, 0xCA))
    bundle.magnet_threshold = baselines.fit_magnet_threshold(holdout.features, bundle.ae)
    out = Path(args.out or args.bundle)
    store.save_bundle(bundle, out)
    print(f"calibrated horizon {bundle.detector.max_horizon} over {args.sessions} sessions; saved {out}")


def cmd_attack(args, extras):
    pcfg = _pipeline_config(args, extras)
    train, test = load_dataset(pcfg.dataset, seed=pcfg.seed, synthetic=pcfg.synthetic, rescale=pcfg.rescale)
    model = train_service_model(train.features, train.labels, pcfg.model, pcfg.service_config(),
                                train.num_classes)
    target = attacks.Target(model, name=args.model)
    base = attacks.AttackConfig(args.kind, args.queries or 100, args.epsilon, args.fraction,
                                attacks.BLACK_BOX if args.extra_features else attacks.WHITE_BOX,
                                args.extra_features, args.seed)
    try:
        grid = json.loads(args.grid) if args.grid else {"num_queries": [base.num_queries]}
    except json.JSONDecodeError as e:
        raise UsageError(f"--grid is not valid JSON: {e}") from None
    seeds = attacks.select_seeds(test, args.seeds, make_rng(args.seed, 0x5EED))
    rows = attacks.sweep(grid, target, seeds, base)
    out = args.out or f"attack_{args.model}.csv"
    attacks.write_sweep_csv(rows, out, include_timing=args.timing)
    for r in rows:
        print(f"{args.model} {r.kind} n={r.num_queries} eps={r.epsilon} f={r.feature_fraction} "
              f"extra={r.extra_features}: {r.metric}={r.value:.4f}")
    print(f"wrote {out}")


def _read_queries(path, k):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return np.empty((0, k))
    header = [h.strip() for h in rows[0]]
    keep = [i for i, h in enumerate(header) if h != "label"]
    try:
        q = np.array([[float(r[i]) for i in keep] for r in rows[1:] if r], dtype=np.float64)
    except (ValueError, IndexError) as e:
        raise LeakGuardError(f"{path}: unreadable query row: {e}") from None
    return q.reshape(-1, len(keep))


def cmd_detect(args, extras):
    bundle = store.load_bundle(args.bundle)
    if bundle.calibration is None:
        raise LeakGuardError("bundle has no calibration table; run `calibrate` first")
    queries = _read_queries(args.input, bundle.ae.input_dim)
    session = None
    state = None
    if args.state_file:
        key = store.key_from_env()
        if key is None:
            raise LeakGuardError(f"set {store.KEY_ENV} to a {store.KEY_BYTES}-byte hex key to persist state")
        session = store.SessionStore(args.state_file, key, args.sync_dir, args.sync_every)
        state = session.load()
    state = state or det.DetectorState(bundle.num_classes, bundle.ae.latent_dim)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for q in queries:
            b = det.observe(state, q, bundle.ae, bundle.service, bundle.detector, bundle.calibration,
                            parallel=args.parallel)
            out.write(b.to_json() + "\n")
            if session is not None:
                session.save(state)
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"t={state.t} verdict={state.verdict}", file=sys.stderr)


def cmd_evaluate(args, extras):
    pcfg = _pipeline_config(args, extras)
    report = run_pipeline(pcfg)
    out = Path(args.out or "report")
    emit_report(report, out)
    print(format_table(report))
    print(f"wrote report to {out}")


def cmd_report(args, extras):
    out = Path(args.out or "report")
    try:
        summary = json.loads((out / "summary.json").read_text())
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise LeakGuardError(f"cannot read report in {out}: {e}") from None
    t = args.queries or summary.get("pool", {}).get("horizon")
    print(f"pool: {summary.get('pool')}")
    print(f"{'method':<8} {'acc':>7} {'prec':>7} {'recall':>7}   tp  fp  tn  fn")
    for m in METHODS:
        for r in rows:
            if r["method"] == m and int(r["t"]) == t:
                pct = lambda v: "   null" if v == "" else f"{100 * float(v):7.2f}"
                print(f"{m:<8} {pct(r['accuracy'])} {pct(r['precision'])} {pct(r['recall'])} "
                      f"{int(r['tp']):4d}{int(r['fp']):4d}{int(r['tn']):4d}{int(r['fn']):4d}")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "calibrate": cmd_calibrate, "attack": cmd_attack,
            "detect": cmd_detect, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        extras = {}
        if args.config:
            extras, args = _apply_config(parser, args, argv)
        HANDLERS[args.command](args, extras)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"leakguard: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except (LeakGuardError, ValueError, OSError) as e:
        print(f"leakguard: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
