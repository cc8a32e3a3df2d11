"""Command-line pipeline: gen -> prep -> train -> eval -> report.

Exit status is 0 on success, 2 for invalid input or configuration, and 3 for
numeric failures (non-finite values, diverged training, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, neural
from .dataio import DataError, load_dataset, save_dataset
from .preprocess import FEATURE_SETS, build_features, load_features, save_features
from .synthgen import ConfigError, GeneratorConfig, generate_dataset, load_config

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("gazeintent")


def cmd_gen(args) -> int:
    cfg = load_config(args.config) if args.config else GeneratorConfig()
    if args.seed is not None:
        cfg = GeneratorConfig.from_dict({**cfg.to_dict(), "rng_seed": args.seed})
    ds = generate_dataset(cfg)
    save_dataset(ds, args.out)
    log.info("wrote %d trials to %s", len(ds), args.out)
    return EXIT_OK


def cmd_prep(args) -> int:
    ds = load_dataset(args.inp)
    ff = build_features(ds, args.features)
    save_features(ff, args.out)
    log.info("wrote %d %s feature records to %s", len(ff.records), args.features, args.out)
    return EXIT_OK


def _options(args) -> dict:
    opts = {}
    midas = {}
    if args.epochs is not None:
        midas["epochs"] = args.epochs
    if args.hidden is not None:
        midas["hidden_size"] = args.hidden
    if midas:
        opts["midas"] = midas
    return opts


def cmd_train(args) -> int:
    ff = load_features(args.features)
    split = harness.make_split(ff, args.cv, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def save_fold(fold, adapter, acc):
        if args.model == "midas":
            neural.save_checkpoint(adapter.fitted, out_dir / f"fold{fold}.ckpt.json")
        elif hasattr(adapter.fitted, "to_dict"):
            (out_dir / f"fold{fold}.model.json").write_text(json.dumps(adapter.fitted.to_dict(), sort_keys=True) + "\n")
        elif hasattr(adapter.fitted, "to_json"):
            (out_dir / f"fold{fold}.model.json").write_text(adapter.fitted.to_json() + "\n")
        log.info("fold %d accuracy %.4f", fold, acc)

    lengths = harness.LENGTH_GRID if args.curve else None
    entry = harness.run_cv(ff, args.model, split, seed=args.seed, options=_options(args), lengths=lengths, on_fold=save_fold)
    report = harness.EvalReport(
        [entry],
        {"seed": args.seed, "scheme": args.cv, "features": ff.feature_set, "provenance": ff.provenance},
    )
    (out_dir / "results.json").write_text(report.to_json())
    (out_dir / "split.json").write_text(json.dumps(split.to_dict(), sort_keys=True) + "\n")
    print(f"{args.model} on {ff.feature_set} ({args.cv}): {entry.mean:.4f} ± {entry.std:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Accuracy over sequence length using the fold checkpoints written by ``train``."""
    run = Path(args.run)
    ff = load_features(args.features)
    split = harness.SplitPlan.from_dict(json.loads((run / "split.json").read_text()))
    results = harness.EvalReport.from_dict(json.loads((run / "results.json").read_text()))
    entry = results.entries[0]
    if not args.curve:
        print(f"{entry.model} on {entry.feature_set}: {entry.mean:.4f} ± {entry.std:.4f}")
        return EXIT_OK
    lengths = [int(v) for v in args.lengths.split(",")] if args.lengths else list(harness.LENGTH_GRID)
    if entry.model == "midas":
        ids = [r.trial_id for r in ff.records]
        labels = np.array([r.label for r in ff.records])
        fold_curves = []
        for fold in range(split.n_folds):
            ckpt = run / f"fold{fold}.ckpt.json"
            if not ckpt.exists():
                continue
            model = neural.load_checkpoint(ckpt)
            test = np.flatnonzero(split.test_mask(ids, fold))
            batch = neural.make_batch(model, [ff.records[i].series for i in test])
            fold_curves.append([float(np.mean(neural.predict(model, batch.truncate(L)) == labels[test])) for L in lengths])
        fc = np.array(fold_curves)
        entry.fold_curves = fold_curves
        entry.curve = [(L, float(fc[:, j].mean()), float(fc[:, j].std())) for j, L in enumerate(lengths)]
    else:
        entry = harness.run_cv(ff, entry.model, split, seed=entry.seed, lengths=lengths)
    text = harness.curve_csv(entry)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    report = harness.EvalReport()
    for path in args.results:
        part = harness.EvalReport.from_dict(json.loads(Path(path).read_text()))
        report.entries.extend(part.entries)
        report.metadata.setdefault("sources", []).append(Path(path).name)
    text = harness.render_report(report, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = neural.MidasConfig(input_channels=2, hidden_size=4)
    model = neural.MidasModel.init(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    X = rng.normal(size=(10, 3, 2))
    M = np.ones((10, 3), dtype=bool)
    M[7:, 1] = False
    batch = neural.Batch(X, M, np.array([0, 1, 1]))
    err = neural.grad_check(model, batch, eps=args.eps)
    print(f"max relative error {err:.3e} over {model.n_params()} parameters")
    return EXIT_OK if err < 1e-4 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gazeintent", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="generator config JSON (defaults if omitted)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("prep", help="crop trials and derive a feature set")
    pr.add_argument("--in", dest="inp", required=True)
    pr.add_argument("--features", required=True, choices=list(FEATURE_SETS))
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prep)

    t = sub.add_parser("train", help="cross-validate one model on one feature file")
    t.add_argument("--model", required=True, choices=list(harness.MODELS))
    t.add_argument("--features", required=True, help="feature file written by prep")
    t.add_argument("--cv", default="kfold5", help="kfold5 | kfold<k> | loso")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--curve", action="store_true", help="also record accuracy over sequence length")
    t.add_argument("--epochs", type=int)
    t.add_argument("--hidden", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a training run")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--features", required=True)
    e.add_argument("--curve", action="store_true", help="accuracy over sequence length")
    e.add_argument("--lengths", help="comma-separated lengths in samples")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render results as a table")
    r.add_argument("results", nargs="+", help="results.json files")
    r.add_argument("--format", choices=["csv", "md"], default="csv")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (neural.NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
