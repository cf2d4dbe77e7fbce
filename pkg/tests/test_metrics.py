import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cae_qsvm.errors import DataError
from cae_qsvm.metrics import (
    METRIC_NAMES,
    ConfusionMatrix,
    MetricsReport,
    aggregate_runs,
    confusion_and_metrics,
    metrics_from_confusion,
    report_to_json,
    write_metrics_csv,
)


def labels_for(tp, fp, tn, fn):
    t = [-1] * tp + [1] * fp + [1] * tn + [-1] * fn
    p = [-1] * tp + [-1] * fp + [1] * tn + [1] * fn
    return np.array(t), np.array(p)


def exact_metrics(tp, fp, tn, fn):
    """Rational-arithmetic reference; MCC squared to stay exact."""
    F = Fraction
    n = tp + fp + tn + fn
    return {
        "accuracy": F(tp + tn, n), "ppp": F(tp + fp, n),
        "precision": F(tp, tp + fp), "recall": F(tp, tp + fn),
        "npv": F(tn, tn + fn), "specificity": F(tn, tn + fp),
        "fpr": F(fp, fp + tn), "fnr": F(fn, fn + tp), "f1": F(2 * tp, 2 * tp + fp + fn),
        "mcc2": F((tp * tn - fp * fn) ** 2, (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)),
    }


def test_fixture_values():
    cm, m = confusion_and_metrics(*labels_for(2, 1, 96, 1))
    assert cm == ConfusionMatrix(2, 1, 96, 1)
    expected = {"accuracy": 0.98, "ppp": 0.03, "precision": 2 / 3, "recall": 2 / 3,
                "npv": 96 / 97, "specificity": 96 / 97, "fpr": 1 / 97, "fnr": 1 / 3,
                "f1": 2 / 3, "mcc": 191 / 291}
    for name, v in expected.items():
        assert abs(getattr(m, name) - v) <= 1e-12, name
    ref = exact_metrics(2, 1, 96, 1)
    assert ref["mcc2"] == Fraction(191, 291) ** 2


def test_perfect_predictions():
    y = np.array([1, -1, 1, 1, -1])
    _, m = confusion_and_metrics(y, y)
    for name in ("accuracy", "precision", "recall", "f1", "mcc"):
        assert getattr(m, name) == 1.0
    assert m.fpr == 0.0 and m.fnr == 0.0


def test_all_normal_predictions_undefined():
    t = np.array([1, 1, -1, -1])
    _, m = confusion_and_metrics(t, np.ones(4, dtype=int))
    assert m.precision is None and m.mcc is None
    assert m.recall == 0.0 and m.ppp == 0.0
    payload = json.loads(report_to_json(m))
    assert payload["precision"] is None


def test_single_class_truth_undefined():
    _, m = confusion_and_metrics(np.ones(5, dtype=int), np.ones(5, dtype=int))
    assert m.recall is None and m.fnr is None and m.mcc is None
    assert m.accuracy == 1.0 and m.specificity == 1.0


def test_bad_inputs():
    with pytest.raises(DataError):
        confusion_and_metrics([1, -1], [1])
    with pytest.raises(DataError, match="index 1"):
        confusion_and_metrics([1, 0], [1, 1])


@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
def test_matches_rational_reference_and_ranges(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    m = metrics_from_confusion(ConfusionMatrix(tp, fp, tn, fn))
    ref = exact_metrics(tp, fp, tn, fn) if min(tp + fp, tp + fn, tn + fp, tn + fn) > 0 else None
    assert m.accuracy == (tp + tn) / (tp + fp + tn + fn)
    for name in METRIC_NAMES:
        v = getattr(m, name)
        if v is None:
            continue
        lo = -1.0 if name == "mcc" else 0.0
        assert lo - 1e-15 <= v <= 1.0 + 1e-15
        if ref is not None and name != "mcc":
            assert abs(v - float(ref[name])) <= 1e-15
    if ref is not None:
        assert abs(m.mcc**2 - float(ref["mcc2"])) <= 1e-12
    if m.specificity is not None:
        assert abs(m.fpr - (1 - m.specificity)) <= 1e-15
    if m.recall is not None:
        assert abs(m.fnr - (1 - m.recall)) <= 1e-15


@given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 30), st.integers(1, 30))
def test_polarity_swap(tp, fp, tn, fn):
    t, p = labels_for(tp, fp, tn, fn)
    _, m = confusion_and_metrics(t, p)
    _, s = confusion_and_metrics(-t, -p)
    assert s.precision == pytest.approx(m.npv) and s.recall == pytest.approx(m.specificity)
    assert s.npv == pytest.approx(m.precision) and s.specificity == pytest.approx(m.recall)
    assert s.fpr == pytest.approx(m.fnr) and s.fnr == pytest.approx(m.fpr)


def _report(**kw):
    base = dict.fromkeys(METRIC_NAMES, 0.5)
    base.update(kw)
    return MetricsReport(**base)


def test_aggregate():
    agg = aggregate_runs([_report(accuracy=v) for v in (0.5, 0.6, 0.7)])
    assert agg.metrics["accuracy"].mean == pytest.approx(0.6)
    assert agg.metrics["accuracy"].se == pytest.approx(0.1 / np.sqrt(3))
    assert aggregate_runs([_report()]).metrics["mcc"].se == 0.0
    agg = aggregate_runs([_report(mcc=0.2), _report(mcc=None), _report(mcc=0.4)])
    assert agg.metrics["mcc"].count == 2 and agg.metrics["mcc"].mean == pytest.approx(0.3)
    assert agg.runs == 3
    with pytest.raises(DataError):
        aggregate_runs([])


def test_csv_export(tmp_path):
    rep = _report(precision=None)
    write_metrics_csv({"qsvm/run0": rep, "qsvm": aggregate_runs([rep, rep])}, tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 20
    prec = [r for r in rows if r["metric"] == "precision"]
    assert prec[0]["value"] == "" and prec[1]["count"] == "0"
