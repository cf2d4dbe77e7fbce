"""End-to-end experiments: features -> kernels -> SVM fits -> metrics.

One experiment trains the autoencoder once, then for every repetition ``r``
draws a fresh stratified subsample with seed ``seed + r``, builds quantum
(fidelity) and classical (RBF) Gram matrices on identical rows, fits the
requested methods and scores the test rows. Everything that is a function
of the config alone goes into ``metrics.json``; paths and wall-clock data
go into ``run_info.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cae import ARCHITECTURES, CaeModel, TrainConfig, build_network, extract_features, save_checkpoint
from .cae import train as train_cae
from .cae import write_loss_csv
from .data import Dataset, SamplingPlan, anomaly_train_filter, load_dataset, preprocess, stratified_subsample
from .errors import CaeQsvmError, ConfigError
from .metrics import aggregate_runs, confusion_and_metrics, write_metrics_csv
from .qkernel import gram_matrix
from .svm import default_rbf_gamma, fit_csvm, fit_ocsvm, rbf_gram, save_model, score_and_predict

log = logging.getLogger(__name__)

METHODS = ("qsvm", "qocsvm", "csvm", "cocsvm")
VOTES = ("none", "majority", "inverse-loss-weighted")


@dataclass(frozen=True)
class DatasetProfile:
    fmt: str
    classes: tuple
    methods: tuple
    class_weights: dict | None = None
    nu: float = 0.5
    has_test_split: bool = True
    use_cae: bool = True


PROFILES = {
    "mnist": DatasetProfile("idx", (0, 1), ("qsvm", "csvm")),
    "cifar10": DatasetProfile("cifar-binary", (0, 1), ("qsvm", "csvm")),
    # label 0 marks pulsars in the image release, 1 in the tabular one
    "htru1": DatasetProfile("raw-container", (1, 0), METHODS, {-1: 50.0, 1: 1.02}, 0.2),
    "htru2": DatasetProfile("csv", (0, 1), METHODS, {-1: 11.11, 1: 1.10}, 0.9,
                            has_test_split=False, use_cae=False),
    "raw": DatasetProfile("raw-container", (1, 0), METHODS),
}
BALANCED = ("mnist", "cifar10")


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_path: str = ""
    architecture: str = "simplified"
    train: TrainConfig = field(default_factory=TrainConfig)
    cae_train_size: int | None = None
    sampling: SamplingPlan = field(default_factory=SamplingPlan)
    methods: tuple | None = None
    binary_classes: tuple | None = None
    class_weights: dict | None = None
    nu: float | None = None
    C: float = 1.0
    rbf_gamma: float | None = None
    kernel_mode: str = "circuit"
    repetitions: int = 3
    seed: int = 0
    out_dir: str = "runs"
    vote: str = "none"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.sampling, dict):
            self.sampling = SamplingPlan(**self.sampling)
        if self.dataset not in PROFILES:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {sorted(PROFILES)}")
        prof = PROFILES[self.dataset]
        self.methods = tuple(self.methods) if self.methods else prof.methods
        self.binary_classes = tuple(self.binary_classes) if self.binary_classes else prof.classes
        if self.class_weights is None:
            self.class_weights = prof.class_weights
        if self.class_weights is not None:
            self.class_weights = {int(k): float(v) for k, v in self.class_weights.items()}
        if self.nu is None:
            self.nu = prof.nu
        self.validate()

    def validate(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; expected a subset of {METHODS}")
        if self.dataset in BALANCED and any(m.endswith("ocsvm") for m in self.methods):
            raise ConfigError(f"one-class methods are not run on the balanced {self.dataset} set")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.kernel_mode not in ("circuit", "analytic"):
            raise ConfigError("kernel_mode must be circuit or analytic")
        if self.vote not in VOTES:
            raise ConfigError(f"vote must be one of {VOTES}")
        if self.C <= 0 or not 0 < self.nu <= 1:
            raise ConfigError("C must be positive and nu in (0, 1]")

    @property
    def profile(self):
        return PROFILES[self.dataset]

    def to_dict(self, include_paths=True):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("train", "sampling"):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            elif f.name == "class_weights" and v is not None:
                v = {str(k): w for k, w in sorted(v.items())}
            d[f.name] = v
        if not include_paths:
            d.pop("data_path")
            d.pop("out_dir")
        return d

    @classmethod
    def from_json(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s) {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_json: Path
    aggregate_json: Path
    runs: list
    aggregate: dict
    score_files: dict = field(default_factory=dict)
    model_files: dict = field(default_factory=dict)
    loss_csvs: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    payload: dict = field(default_factory=dict)


class StageError(CaeQsvmError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc
        self.exit_code = getattr(exc, "exit_code", 1)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except CaeQsvmError as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------- inputs


def load_splits(config):
    """Preprocessed (train, test) datasets; test is None without a test partition."""
    prof = config.profile
    fmt = prof.fmt
    train = load_dataset(config.data_path, fmt, "train", provenance=config.dataset)
    train, stats = preprocess(train, config.binary_classes)
    test = None
    if prof.has_test_split:
        test = load_dataset(config.data_path, fmt, "test", provenance=config.dataset)
        test, _ = preprocess(test, config.binary_classes, stats=stats)
    return train, test


def train_extractor(config, images, out_dir, name="cae", seed_offset=0):
    """Train one autoencoder on (a seeded sample of) ``images``."""
    rng = np.random.default_rng(config.seed + seed_offset)
    if config.cae_train_size is not None and config.cae_train_size < len(images):
        images = images[np.sort(rng.choice(len(images), config.cae_train_size, replace=False))]
    spec = build_network(config.architecture, images.shape[1:])
    model = CaeModel.create(spec, seed=config.seed + seed_offset)
    tcfg = replace(config.train, seed=config.train.seed + seed_offset)
    model, losses = train_cae(model, np.asarray(images, dtype=np.float64), tcfg)
    loss_csv = out_dir / f"{name}_loss.csv"
    write_loss_csv(losses, loss_csv)
    save_checkpoint(model, out_dir / f"{name}.qkcae")
    return model, loss_csv


# --------------------------------------------------------------- methods


def _digest(idx):
    return hashlib.sha256(np.asarray(idx, dtype=np.int64).tobytes()).hexdigest()[:16]


def fit_and_score(method, config, fa, ya, fb, grams):
    """Fit one method on training features and score the test rows.

    ``grams`` caches the per-repetition kernel matrices so the quantum and
    classical methods each build theirs once.
    """
    quantum = method.startswith("q")
    key = "quantum" if quantum else "rbf"
    if key not in grams:
        if quantum:
            k = _stage("gram", gram_matrix, fa, mode=config.kernel_mode).values
            kx = _stage("gram", gram_matrix, fb, fa, mode=config.kernel_mode).values
        else:
            gamma = config.rbf_gamma if config.rbf_gamma is not None else default_rbf_gamma(fa)
            k, kx = rbf_gram(fa, gamma=gamma), rbf_gram(fb, fa, gamma=gamma)
        grams[key] = (k, kx)
    k, kx = grams[key]
    audit = {}
    if method.endswith("ocsvm"):
        normal = _stage("fit", anomaly_train_filter, Dataset(fa, ya))
        keep = normal.indices
        audit = {"ocsvm_train_size": int(keep.size), "ocsvm_train_anomalies": int(np.sum(ya[keep] == -1)),
                 "removed_anomalies": int(len(ya) - keep.size)}
        model = _stage("fit", fit_ocsvm, k[np.ix_(keep, keep)], config.nu)
        report = _stage("score", score_and_predict, model, kx[:, keep])
    else:
        model = _stage("fit", fit_csvm, k, ya, config.C, config.class_weights)
        report = _stage("score", score_and_predict, model, kx)
    return model, report, audit


def write_scores(path, sample_index, report, true_labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "score", "true_label", "predicted_label"])
        for i, s, t, p in zip(sample_index, report.scores, true_labels, report.labels):
            w.writerow([int(i), repr(float(s)), int(t), int(p)])


def combine_votes(label_sets, vote, losses=None):
    """Combine per-channel +-1 predictions by majority or inverse-loss weights."""
    if vote == "none":
        return None
    if len(label_sets) < 3:
        raise ConfigError(f"voting needs 3 channel results, got {len(label_sets)}")
    labels = np.vstack(label_sets).astype(float)
    if vote == "majority":
        w = np.ones(len(label_sets))
    elif vote == "inverse-loss-weighted":
        w = inverse_loss_weights(losses)
    else:
        raise ConfigError(f"unknown vote {vote!r}")
    return np.where(w @ labels >= 0, 1, -1)


def inverse_loss_weights(losses):
    inv = 1.0 / np.asarray(losses, dtype=float)
    return inv / inv.sum()


# ------------------------------------------------------------ experiments


def _run(config, extractors, losses=None):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = _stage("load", load_splits, config)
    channels = [c for _, c in extractors if c is not None]
    if channels and (not train.is_image or train.x.shape[1] <= max(channels)):
        raise ConfigError(f"channel-wise mode needs a 3-channel image dataset, got shape {train.x.shape[1:]}")
    t0 = time.time()
    feats = {}
    loss_csvs = {}
    for name, channel in extractors:
        if channel is None and not config.profile.use_cae:
            feats[name] = None
            continue
        imgs = train.x if channel is None else train.x[:, channel : channel + 1]
        offset = 0 if channel is None else channel
        model, loss_csv = _stage("train-cae", train_extractor, config, imgs, out, name or "cae", offset)
        feats[name] = (model, channel)
        loss_csvs[name or "cae"] = loss_csv
        if losses is not None:
            losses[name] = model.final_train_loss

    runs, failures, score_files, model_files = [], [], {}, {}
    per_label = {}
    for r in range(config.repetitions):
        seed_r = config.seed + r
        rep_dir = out / f"rep{r}"
        rep_dir.mkdir(exist_ok=True)
        try:
            plan = replace(config.sampling, seed=seed_r)
            tr, te = _stage("subsample", stratified_subsample, train, plan, test)
            rep_runs = []
            channel_labels = {m: [] for m in config.methods}
            for name, _ in extractors:
                if feats[name] is None:
                    fa, fb = tr.x, te.x
                else:
                    model, ch = feats[name]
                    xa = tr.x if ch is None else tr.x[:, ch : ch + 1]
                    xb = te.x if ch is None else te.x[:, ch : ch + 1]
                    fa = _stage("extract", extract_features, model, xa)
                    fb = _stage("extract", extract_features, model, xb)
                grams = {}
                for method in config.methods:
                    label = f"{name}/{method}" if name else method
                    svm, rep, audit = fit_and_score(method, config, fa, tr.labels, fb, grams)
                    tag = label.replace("/", "_")
                    score_files[(r, label)] = rep_dir / f"{tag}_scores.csv"
                    write_scores(score_files[(r, label)], te.indices, rep, te.labels)
                    model_files[(r, label)] = rep_dir / f"{tag}_model.json"
                    save_model(svm, model_files[(r, label)])
                    rep_runs.append(_entry(r, seed_r, label, te.labels, rep.labels, tr, te, audit))
                    channel_labels[method].append(rep.labels)
            if config.vote != "none":
                for method in config.methods:
                    w = [losses[name] for name, _ in extractors] if losses else None
                    combined = combine_votes(channel_labels[method], config.vote, w)
                    rep_runs.append(_entry(r, seed_r, f"combined/{method}", te.labels, combined, tr, te, {}))
            runs.extend(rep_runs)
        except StageError as exc:
            log.error("repetition %d failed: %s", r, exc)
            failures.append({"repetition": r, "seed": seed_r, "stage": exc.stage, "error": str(exc.cause)})
    for e in runs:
        per_label.setdefault(e["method"], []).append(e["_report"])
    aggregate = {label: aggregate_runs(reps).to_dict() for label, reps in sorted(per_label.items())}
    payload = {
        "version": __version__,
        "config": config.to_dict(include_paths=False),
        "runs": [{k: v for k, v in e.items() if k != "_report"} for e in runs],
        "aggregate": aggregate,
        "failures": failures,
    }
    if losses:
        payload["channel_weights"] = dict(zip(losses, inverse_loss_weights(list(losses.values())).tolist()))
    metrics_json = out / "metrics.json"
    metrics_json.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    aggregate_json = out / "aggregate.json"
    aggregate_json.write_text(json.dumps(aggregate, sort_keys=True, indent=1) + "\n")
    write_metrics_csv({label: aggregate_runs(reps) for label, reps in sorted(per_label.items())},
                      out / "metrics.csv")
    (out / "run_info.json").write_text(json.dumps({
        "config": config.to_dict(), "elapsed_seconds": time.time() - t0,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }, sort_keys=True, indent=1) + "\n")
    return RunArtifacts(out, metrics_json, aggregate_json, runs, aggregate, score_files, model_files,
                        loss_csvs, failures, payload)


def _entry(r, seed, label, truth, predicted, tr, te, audit):
    cm, m = confusion_and_metrics(truth, predicted)
    return {"repetition": r, "seed": seed, "method": label, "confusion": asdict(cm),
            "metrics": m.to_dict(), "n_train": len(tr), "n_test": len(te),
            "train_indices": _digest(tr.indices), "test_indices": _digest(te.indices),
            "audit": audit, "_report": m}


def run_experiment(config):
    """Full experiment for one dataset; see module docstring."""
    return _run(config, [("", None)])


def channelwise_ensemble(config, vote=None):
    """One simplified autoencoder + SVM per image channel, optionally voted."""
    config = replace(config, vote=vote or config.vote, architecture="simplified")
    if not config.profile.use_cae:
        raise ConfigError("channel-wise mode needs a 3-channel image dataset")
    losses = {}
    return _run(config, [(f"ch{c}", c) for c in range(3)], losses=losses)
