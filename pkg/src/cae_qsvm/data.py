"""Dataset parsing, scaling, relabelling and subsampling.

Supported sources:

* ``idx``: MNIST-style big-endian IDX image/label pairs (optionally gzipped)
* ``cifar-binary``: CIFAR-10 binary batches, 1 label byte + 3072 pixel bytes per record
* ``csv``: HTRU-2 style rows of 8 features and a trailing class column
* ``raw-container``: QKDS1 files, ``b"QKDS1"`` + little-endian ``<IIII`` (n, c, h, w),
  float32 payload, int8 labels

Image pixels are stored as float32 in [0, 1]. Labels stay raw until
``preprocess`` maps a pair of classes to +1 (normal) / -1 (anomaly).
"""

from __future__ import annotations

import csv
import gzip
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

FORMATS = ("idx", "cifar-binary", "csv", "raw-container")
QKDS_MAGIC = b"QKDS1"
CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    provenance: str = "raw"
    indices: np.ndarray | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.x) != len(self.labels):
            raise DataError(f"{len(self.x)} samples but {len(self.labels)} labels")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(self.labels)))

    def __len__(self):
        return len(self.labels)

    @property
    def is_image(self):
        return self.x.ndim == 4

    @property
    def class_counts(self):
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    @property
    def class_ratio(self):
        """Fraction of anomalies (-1) once labels are binary."""
        return float(np.mean(self.labels == -1)) if len(self) else 0.0

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return replace(self, x=self.x[idx], labels=self.labels[idx], indices=self.indices[idx])


@dataclass(frozen=True)
class SamplingPlan:
    train_size: int = 500
    test_size: int = 500
    stratified: bool = True
    seed: int = 0


@dataclass(frozen=True, eq=False)
class MinMaxStats:
    low: np.ndarray
    high: np.ndarray

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        span = self.high - self.low
        safe = np.where(span > 0, span, 1.0)
        shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        out = (x - self.low.reshape(shape)) / safe.reshape(shape)
        # constant features carry no information; pin them to 0
        return np.where((span > 0).reshape(shape), out, 0.0)


# ------------------------------------------------------------------ IDX


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf, name="<idx>"):
    if len(buf) < 4:
        raise FormatError(f"{name}: truncated IDX header", 0)
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError(f"{name}: bad IDX magic {buf[:4].hex()}", 0)
    code, ndim = buf[2], buf[3]
    if code not in IDX_DTYPES:
        raise FormatError(f"{name}: unknown IDX element type 0x{code:02x}", 2)
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"{name}: truncated IDX dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    dtype = np.dtype(IDX_DTYPES[code])
    need = head + int(np.prod(dims)) * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"{name}: truncated IDX payload, expected {need} bytes, file has {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{name}: {len(buf) - need} trailing bytes after IDX payload", need)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def read_idx(path):
    return parse_idx(_read_bytes(path), str(path))


def _find(directory, stem):
    hits = sorted(p for p in Path(directory).iterdir() if p.name.startswith(stem))
    if not hits:
        raise DataError(f"{directory}: no file starting with {stem!r}")
    return hits[0]


def load_idx(directory, split="train"):
    prefix = "train" if split == "train" else "t10k"
    images = read_idx(_find(directory, f"{prefix}-images"))
    labels = read_idx(_find(directory, f"{prefix}-labels"))
    if images.ndim != 3:
        raise FormatError(f"{directory}: image file must have 3 dimensions, got {images.ndim}", 3)
    if len(images) != len(labels):
        raise DataError(f"{directory}: {len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), "mnist", split=split)


# ---------------------------------------------------------------- CIFAR


def parse_cifar(buf, name="<cifar>"):
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise FormatError(f"{name}: truncated record {whole}, file length {len(buf)} is not a multiple of "
                          f"{CIFAR_RECORD}", whole * CIFAR_RECORD)
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{name}: label {labels[bad]} out of range in record {bad}", bad * CIFAR_RECORD)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return x, labels


def load_cifar(directory, split="train"):
    directory = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    xs, ys = [], []
    for n in names:
        path = directory / n
        x, y = parse_cifar(_read_bytes(path), str(path))
        xs.append(x)
        ys.append(y)
    return Dataset(np.concatenate(xs), np.concatenate(ys), "cifar10", split=split)


# ------------------------------------------------------------------ CSV


def load_htru2_csv(path, n_features=8):
    """Numeric rows of ``n_features`` values plus a class column; a header row is skipped."""
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != n_features + 1:
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {n_features + 1}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise FormatError(f"{path}: line {lineno} is not numeric") from None
            rows.append(vals[:-1])
            labels.append(int(vals[-1]))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels, dtype=np.int64), "htru2")


# ---------------------------------------------------------------- QKDS1


def write_qkds(path, x, labels):
    x = np.asarray(x, dtype="<f4")
    if x.ndim != 4:
        raise DataError(f"container payload must be (n, c, h, w), got shape {x.shape}")
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise DataError("label count must equal sample count")
    if labels.size and (labels.min() < -128 or labels.max() > 127):
        raise DataError("labels must fit in int8")
    with open(path, "wb") as fh:
        fh.write(QKDS_MAGIC)
        fh.write(struct.pack("<IIII", *x.shape))
        fh.write(x.tobytes())
        fh.write(labels.astype(np.int8).tobytes())


def parse_qkds(buf, name="<qkds>"):
    head = len(QKDS_MAGIC) + 16
    if buf[: len(QKDS_MAGIC)] != QKDS_MAGIC:
        raise FormatError(f"{name}: bad container magic {bytes(buf[:5])!r}", 0)
    if len(buf) < head:
        raise FormatError(f"{name}: truncated container header", len(buf))
    n, c, h, w = struct.unpack("<IIII", buf[len(QKDS_MAGIC) : head])
    count = n * c * h * w
    need = head + 4 * count + n
    if len(buf) != need:
        raise FormatError(f"{name}: container header promises {need} bytes, file has {len(buf)}",
                          min(len(buf), need))
    x = np.frombuffer(buf, dtype="<f4", count=count, offset=head).reshape(n, c, h, w)
    labels = np.frombuffer(buf, dtype=np.int8, count=n, offset=head + 4 * count)
    return x.astype(np.float32), labels.astype(np.int64)


def read_qkds(path, provenance="raw", split="train"):
    x, y = parse_qkds(_read_bytes(path), str(path))
    return Dataset(x, y, provenance, split=split)


def convert_directory(src_dir, out_path, shape, dtype="u8", labels_file="labels.csv"):
    """Pack per-sample flat binary dumps listed in ``labels.csv`` into QKDS1.

    ``labels.csv`` has columns ``file,label``. Each dump holds ``prod(shape)``
    values in C order, as uint8 (scaled by 1/255) or little-endian float32.
    """
    src_dir = Path(src_dir)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3:
        raise DataError(f"shape must be (c, h, w), got {shape}")
    np_dtype = {"u8": np.uint8, "f32": np.dtype("<f4")}.get(dtype)
    if np_dtype is None:
        raise DataError(f"dtype must be u8 or f32, got {dtype!r}")
    with open(src_dir / labels_file, newline="") as fh:
        entries = list(csv.DictReader(fh))
    if not entries:
        raise DataError(f"{src_dir / labels_file}: no entries")
    size = int(np.prod(shape))
    x = np.empty((len(entries), *shape), dtype=np.float32)
    labels = np.empty(len(entries), dtype=np.int64)
    for i, e in enumerate(entries):
        buf = (src_dir / e["file"]).read_bytes()
        arr = np.frombuffer(buf, dtype=np_dtype)
        if arr.size != size:
            raise FormatError(f"{e['file']}: expected {size} values, found {arr.size}", len(buf))
        arr = arr.astype(np.float32)
        x[i] = (arr / 255.0 if dtype == "u8" else arr).reshape(shape)
        labels[i] = int(e["label"])
    write_qkds(out_path, x, labels)
    return len(entries)


# -------------------------------------------------------------- loading


def load_dataset(path, fmt, split="train", provenance=None):
    """Load one split. ``path`` is a directory for idx/cifar-binary and a file
    (or a directory holding ``<split>.qkds``) for the others."""
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    if fmt == "idx":
        ds = load_idx(path, split)
    elif fmt == "cifar-binary":
        ds = load_cifar(path, split)
    elif fmt == "csv":
        ds = load_htru2_csv(path)
    else:
        if path.is_dir():
            path = path / f"{split}.qkds"
        ds = read_qkds(path, split=split)
    return replace(ds, provenance=provenance) if provenance else ds


# -------------------------------------------------------- preprocessing


def fit_minmax(dataset):
    """Per-channel (images) or per-column (tabular) extrema of the training split."""
    axes = (0, 2, 3) if dataset.is_image else (0,)
    x = np.asarray(dataset.x, dtype=np.float64)
    return MinMaxStats(x.min(axis=axes), x.max(axis=axes))


def relabel_binary(dataset, classes):
    first, second = classes
    present = set(np.unique(dataset.labels).tolist())
    missing = [c for c in classes if c not in present]
    if missing:
        raise DataError(f"requested class(es) {missing} absent from {dataset.provenance} labels {sorted(present)}")
    keep = np.flatnonzero(np.isin(dataset.labels, classes))
    sub = dataset.take(keep)
    return replace(sub, labels=np.where(sub.labels == first, 1, -1))


def preprocess(dataset, binary_classes=None, minmax=True, stats=None):
    """Relabel to +-1 and min-max scale. Returns ``(dataset, stats)``.

    Statistics are fitted on ``dataset`` unless ``stats`` from the training
    split are passed in; scaled test values may leave [0, 1] and are kept.
    """
    ds = relabel_binary(dataset, binary_classes) if binary_classes is not None else dataset
    if not minmax:
        return ds, None
    if stats is None:
        stats = fit_minmax(ds)
    return replace(ds, x=stats.apply(ds.x).astype(ds.x.dtype if ds.is_image else np.float64)), stats


def _class_counts(labels, size):
    """Largest-remainder allocation of ``size`` draws proportional to class frequency."""
    classes, counts = np.unique(labels, return_counts=True)
    quota = size * counts / counts.sum()
    base = np.floor(quota).astype(int)
    rest = size - base.sum()
    # ties go to the larger class, then the lower label
    order = sorted(range(len(classes)), key=lambda i: (-(quota[i] - base[i]), -counts[i], classes[i]))
    for i in order[:rest]:
        base[i] += 1
    return {int(c): int(b) for c, b in zip(classes, base)}, dict(zip(classes.tolist(), counts.tolist()))


def _draw(labels, size, stratified, rng, what, reference=None):
    if size > len(labels):
        raise DataError(f"{what}: requested {size} samples but only {len(labels)} available")
    if not stratified:
        return np.sort(rng.choice(len(labels), size, replace=False))
    need, _ = _class_counts(labels if reference is None else reference, size)
    picks = []
    for c, k in need.items():
        pool = np.flatnonzero(labels == c)
        if k > len(pool):
            raise DataError(f"{what}: need {k} samples of class {c}, only {len(pool)} available")
        picks.append(rng.choice(pool, k, replace=False))
    return np.sort(np.concatenate(picks))


def stratified_subsample(source, plan, test_source=None):
    """Seeded train/test subsets matching the source class ratio.

    The test subset comes from ``test_source`` when the dataset defines a
    test partition, otherwise from ``source`` rows not used for training.
    """
    rng = np.random.default_rng(plan.seed)
    tr = _draw(source.labels, plan.train_size, plan.stratified, rng, "train subsample")
    train = source.take(tr)
    if test_source is not None:
        te = _draw(test_source.labels, plan.test_size, plan.stratified, rng, "test subsample")
        test = test_source.take(te)
    else:
        rest = np.setdiff1d(np.arange(len(source)), tr)
        te = _draw(source.labels[rest], plan.test_size, plan.stratified, rng, "test subsample",
                   reference=source.labels)
        test = source.take(rest[te])
    return train, replace(test, split="test")


def anomaly_train_filter(dataset):
    """Keep only normal (+1) rows, for one-class training."""
    keep = np.flatnonzero(dataset.labels == 1)
    if keep.size == 0:
        raise DataError("no normal (+1) samples left for one-class training")
    log.info("normal-only filter kept %d of %d samples", keep.size, len(dataset))
    out = dataset.take(keep)
    return replace(out, meta={**dataset.meta, "removed_anomalies": int(len(dataset) - keep.size)})
