"""Command-line entry point: ``cae-qsvm <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cae import extract_features, load_checkpoint
from .data import Dataset, anomaly_train_filter, convert_directory
from .errors import CaeQsvmError, ConfigError, DataError
from .metrics import aggregate_runs, confusion_and_metrics
from .pipeline import (
    METHODS,
    ExperimentConfig,
    channelwise_ensemble,
    load_splits,
    run_experiment,
    train_extractor,
    write_scores,
)
from .qkernel import GramMatrix, gram_matrix, load_gram_csv, save_gram_csv
from .svm import (
    default_rbf_gamma,
    fit_csvm,
    fit_ocsvm,
    load_model,
    rbf_gram,
    save_model,
    score_and_predict,
)

log = logging.getLogger("cae_qsvm")


# ------------------------------------------------------------ config flags


def _weights(text):
    try:
        return {int(k): float(v) for k, v in (p.split(":") for p in text.split(","))}
    except ValueError:
        raise argparse.ArgumentTypeError(f"class weights look like '-1:50,1:1.02', got {text!r}") from None


def add_config_flags(p):
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="JSON file with ExperimentConfig fields")
    g.add_argument("--dataset", choices=["mnist", "cifar10", "htru1", "htru2", "raw"])
    g.add_argument("--data-path")
    g.add_argument("--architecture", choices=["resnet10", "simplified"])
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--val-split", type=float)
    g.add_argument("--no-augmentation", action="store_true", default=None)
    g.add_argument("--cae-train-size", type=int)
    g.add_argument("--train-size", type=int)
    g.add_argument("--test-size", type=int)
    g.add_argument("--methods", nargs="+", choices=METHODS)
    g.add_argument("--classes", nargs=2, type=int, metavar=("NORMAL", "ANOMALY"))
    g.add_argument("--class-weights", type=_weights, help="e.g. --class-weights=-1:50,1:1.02")
    g.add_argument("--nu", type=float)
    g.add_argument("--C", type=float)
    g.add_argument("--rbf-gamma", type=float)
    g.add_argument("--kernel-mode", choices=["circuit", "analytic"])
    g.add_argument("--repetitions", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")


def config_from_args(args):
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    top = {"dataset": "dataset", "data_path": "data_path", "architecture": "architecture",
           "cae_train_size": "cae_train_size", "methods": "methods", "classes": "binary_classes",
           "class_weights": "class_weights", "nu": "nu", "C": "C", "rbf_gamma": "rbf_gamma",
           "kernel_mode": "kernel_mode", "repetitions": "repetitions", "seed": "seed", "out": "out_dir"}
    for arg, key in top.items():
        v = getattr(args, arg, None)
        if v is not None:
            d[key] = v
    train = dict(d.get("train", {}))
    for arg, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
                     ("weight_decay", "weight_decay"), ("val_split", "val_split")):
        v = getattr(args, arg, None)
        if v is not None:
            train[key] = v
    if getattr(args, "no_augmentation", None):
        train["augmentation"] = False
    d["train"] = train
    sampling = dict(d.get("sampling", {}))
    for arg, key in (("train_size", "train_size"), ("test_size", "test_size")):
        v = getattr(args, arg, None)
        if v is not None:
            sampling[key] = v
    d["sampling"] = sampling
    if getattr(args, "vote", None):
        d["vote"] = args.vote
    return ExperimentConfig.from_dict(d)


# ------------------------------------------------------------ file helpers


def write_features(path, indices, labels, feats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "label", *(f"f{i}" for i in range(feats.shape[1]))])
        for i, y, row in zip(indices, labels, feats):
            w.writerow([int(i), int(y), *(repr(float(v)) for v in row)])


def read_features(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["sample_index", "label"]:
        raise DataError(f"{path}: expected a features CSV with sample_index,label header")
    body = rows[1:]
    idx = np.array([int(r[0]) for r in body], dtype=int)
    labels = np.array([int(r[1]) for r in body], dtype=int)
    feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=float)
    return idx, labels, feats


# ------------------------------------------------------------ subcommands


def cmd_convert(args):
    n = convert_directory(args.src, args.out, args.shape, args.dtype)
    print(f"wrote {n} samples to {args.out}")


def cmd_train_cae(args):
    cfg = config_from_args(args)
    if not cfg.profile.use_cae:
        raise ConfigError(f"{cfg.dataset} is tabular and uses its features directly")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_splits(cfg)
    model, loss_csv = train_extractor(cfg, train.x, out)
    print(f"checkpoint {out / 'cae.qkcae'}, losses {loss_csv}, final train loss {model.final_train_loss:.6g}")


def cmd_extract(args):
    cfg = config_from_args(args)
    train, test = load_splits(cfg)
    ds = train if args.split == "train" else test
    if ds is None:
        raise DataError(f"{cfg.dataset} has no {args.split} partition")
    if args.limit:
        ds = ds.take(np.arange(min(args.limit, len(ds))))
    if cfg.profile.use_cae:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required for image datasets")
        feats = extract_features(load_checkpoint(args.checkpoint), ds.x)
    else:
        feats = np.asarray(ds.x, dtype=float)
    write_features(args.output, ds.indices, ds.labels, feats)
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} features to {args.output}")


def cmd_gram(args):
    tr_idx, _, tr = read_features(args.train)
    if args.test:
        te_idx, _, te = read_features(args.test)
        rows, cols, a, b = te_idx, tr_idx, te, tr
    else:
        rows, cols, a, b = tr_idx, tr_idx, tr, None
    if args.kernel == "quantum":
        g = gram_matrix(a, b, mode=args.mode, row_ids=rows.tolist(), col_ids=cols.tolist())
    else:
        gamma = args.gamma if args.gamma is not None else default_rbf_gamma(tr)
        g = GramMatrix(rbf_gram(a, b, gamma), rows.tolist(), cols.tolist())
    save_gram_csv(g, args.output)
    print(f"wrote {g.shape[0]}x{g.shape[1]} Gram matrix to {args.output}")


def cmd_fit(args):
    g = load_gram_csv(args.gram)
    idx, labels, _ = read_features(args.features)
    if list(idx) != list(g.row_ids) or list(idx) != list(g.col_ids):
        raise DataError("Gram row/column ids do not match the features file sample_index column")
    k = g.values
    if args.method == "ocsvm":
        normal = anomaly_train_filter(Dataset(k, labels))
        keep = normal.indices
        model = fit_ocsvm(k[np.ix_(keep, keep)], args.nu, sample_ids=idx[keep].tolist())
    else:
        model = fit_csvm(k, labels, args.C, args.class_weights, sample_ids=idx.tolist())
    save_model(model, args.output)
    print(f"{args.method}: {len(model.support_indices)} support vectors, rho={model.rho:.6g}")


def cmd_score(args):
    model = load_model(args.model)
    g = load_gram_csv(args.gram)
    pos = {c: j for j, c in enumerate(g.col_ids)}
    missing = [s for s in model.sample_ids if s not in pos]
    if missing:
        raise DataError(f"cross-Gram lacks columns for training samples {missing[:5]}")
    k = g.values[:, [pos[s] for s in model.sample_ids]]
    report = score_and_predict(model, k, sample_ids=g.row_ids)
    truth = np.zeros(len(g.row_ids), dtype=int)
    if args.features:
        idx, labels, _ = read_features(args.features)
        lut = dict(zip(idx.tolist(), labels.tolist()))
        truth = np.array([lut[r] for r in g.row_ids])
    write_scores(args.output, g.row_ids, report, truth)
    print(f"scored {len(g.row_ids)} samples, {int(np.sum(report.labels == -1))} flagged as anomalies")


def _read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "true_label" not in rows[0]:
        raise DataError(f"{path}: not a score CSV")
    return (np.array([int(r["true_label"]) for r in rows]),
            np.array([int(r["predicted_label"]) for r in rows]))


def cmd_evaluate(args):
    reports, out = [], {"runs": []}
    for path in args.scores:
        truth, pred = _read_scores(path)
        cm, m = confusion_and_metrics(truth, pred)
        reports.append(m)
        out["runs"].append({"scores": str(path), "confusion": asdict(cm), "metrics": m.to_dict()})
    out["aggregate"] = aggregate_runs(reports).to_dict()
    text = json.dumps(out, sort_keys=True, indent=1) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(summary):
    if summary["mean"] is None:
        return "undefined"
    se = "" if summary["se"] is None else f" +- {summary['se']:.4f}"
    return f"{summary['mean']:.4f}{se}"


def _summarise(art):
    for label, agg in art.aggregate.items():
        m = agg["metrics"]
        print(f"{label:>18}: accuracy {_fmt(m['accuracy'])}, recall {_fmt(m['recall'])}, ppp {_fmt(m['ppp'])}")
    for f in art.failures:
        print(f"repetition {f['repetition']} failed at {f['stage']}: {f['error']}", file=sys.stderr)
    print(f"metrics: {art.metrics_json}")


def cmd_run(args):
    _summarise(run_experiment(config_from_args(args)))


def cmd_channelwise(args):
    _summarise(channelwise_ensemble(config_from_args(args)))


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="cae-qsvm", description="Autoencoder features with simulated quantum-kernel SVMs for anomaly detection.", epilog="exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert", help="pack per-sample binary dumps into a QKDS1 container")
    s.add_argument("src", help="directory with labels.csv (file,label) and the dumps")
    s.add_argument("out")
    s.add_argument("--shape", nargs=3, type=int, required=True, metavar=("C", "H", "W"))
    s.add_argument("--dtype", choices=["u8", "f32"], default="u8")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("train-cae", help="train the autoencoder on the training split")
    add_config_flags(s)
    s.set_defaults(func=cmd_train_cae)

    s = sub.add_parser("extract", help="write latent features of one split to CSV")
    add_config_flags(s)
    s.add_argument("--checkpoint")
    s.add_argument("--split", choices=["train", "test"], default="train")
    s.add_argument("--limit", type=int)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("gram", help="training Gram matrix, or test x train cross-Gram with --test")
    s.add_argument("--train", required=True, help="features CSV of the training rows")
    s.add_argument("--test", help="features CSV of the rows to score")
    s.add_argument("--kernel", choices=["quantum", "rbf"], default="quantum")
    s.add_argument("--mode", choices=["circuit", "analytic"], default="circuit")
    s.add_argument("--gamma", type=float)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gram)

    s = sub.add_parser("fit", help="fit an SVM or one-class SVM on a training Gram matrix")
    s.add_argument("--gram", required=True)
    s.add_argument("--features", required=True, help="features CSV supplying the labels")
    s.add_argument("--method", choices=["csvm", "ocsvm"], default="csvm")
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--class-weights", type=_weights, help="e.g. --class-weights=-1:50,1:1.02")
    s.add_argument("--nu", type=float, default=0.5)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("score", help="score rows of a cross-Gram with a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--gram", required=True)
    s.add_argument("--features", help="features CSV of the scored rows, for true labels")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("evaluate", help="metrics (and their aggregate) from score CSVs")
    s.add_argument("scores", nargs="+")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="full experiment")
    add_config_flags(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("channelwise", help="per-channel experiment with optional voting")
    add_config_flags(s)
    s.add_argument("--vote", choices=["none", "majority", "inverse-loss-weighted"])
    s.set_defaults(func=cmd_channelwise)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CaeQsvmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
