"""Confusion counts and fixed-threshold binary metrics.

Anomalies (label -1) are the positive class. A metric whose denominator is
zero is undefined and carried as ``None`` (JSON ``null``) rather than 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError

METRIC_NAMES = ("accuracy", "ppp", "precision", "recall", "npv", "specificity",
                "fpr", "fnr", "f1", "mcc")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    ppp: float | None
    precision: float | None
    recall: float | None
    npv: float | None
    specificity: float | None
    fpr: float | None
    fnr: float | None
    f1: float | None
    mcc: float | None

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MetricSummary:
    mean: float | None
    se: float | None
    count: int


@dataclass(frozen=True)
class AggregateReport:
    metrics: dict
    runs: int

    def to_dict(self):
        return {"runs": self.runs,
                "metrics": {k: asdict(v) for k, v in self.metrics.items()}}


def _ratio(num, den):
    return num / den if den else None


def confusion_matrix(true_labels, predicted_labels):
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape or t.ndim != 1:
        raise DataError(f"label vectors differ in shape: {t.shape} vs {p.shape}")
    for name, v in (("true", t), ("predicted", p)):
        bad = ~np.isin(v, (-1, 1))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"{name} label at index {i} is {v[i]!r}, expected -1 or +1")
    return ConfusionMatrix(
        tp=int(np.sum((t == -1) & (p == -1))),
        fp=int(np.sum((t == 1) & (p == -1))),
        tn=int(np.sum((t == 1) & (p == 1))),
        fn=int(np.sum((t == -1) & (p == 1))),
    )


def metrics_from_confusion(cm):
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    n = cm.total
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return MetricsReport(
        accuracy=_ratio(tp + tn, n),
        ppp=_ratio(tp + fp, n),
        precision=precision,
        recall=recall,
        npv=_ratio(tn, tn + fn),
        specificity=specificity,
        fpr=_ratio(fp, fp + tn),
        fnr=_ratio(fn, fn + tp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        mcc=(tp * tn - fp * fn) / math.sqrt(den) if den else None,
    )


def confusion_and_metrics(true_labels, predicted_labels):
    cm = confusion_matrix(true_labels, predicted_labels)
    return cm, metrics_from_confusion(cm)


def aggregate_runs(reports):
    """Mean and standard error (sample std / sqrt(count)) per metric.

    Undefined values are skipped per metric; ``count`` records how many runs
    contributed. A metric seen only once has SE 0.
    """
    reports = list(reports)
    if not reports:
        raise DataError("aggregate_runs needs at least one report")
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports]
        vals = np.array([v for v in vals if v is not None], dtype=float)
        if vals.size == 0:
            out[name] = MetricSummary(None, None, 0)
            continue
        se = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        out[name] = MetricSummary(float(np.mean(vals)), se, int(vals.size))
    return AggregateReport(out, len(reports))


def report_to_json(report):
    return json.dumps(report.to_dict(), sort_keys=True, indent=1)


def write_metrics_csv(rows, path):
    """Long-format CSV: one ``(label, metric, value)`` line per entry.

    ``rows`` maps a label (method, run, ...) to a MetricsReport or
    AggregateReport; undefined values are written as empty cells.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "metric", "value", "se", "count"])
        for label, rep in rows.items():
            for name in METRIC_NAMES:
                if isinstance(rep, AggregateReport):
                    s = rep.metrics[name]
                    w.writerow([label, name, _cell(s.mean), _cell(s.se), s.count])
                else:
                    w.writerow([label, name, _cell(getattr(rep, name)), "", 1])


def _cell(v):
    return "" if v is None else repr(float(v))
