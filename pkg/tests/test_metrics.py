import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acdl import metrics as MT

binary_pairs = st.integers(1, 60).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                        st.lists(st.integers(0, 1), min_size=n, max_size=n)))


def cm(tp, tn, fp, fn):
    return MT.ConfusionMatrix(tp, tn, fp, fn)


# --- confusion --------------------------------------------------------------------

def test_confusion_perfect():
    y = [1] * 5 + [0] * 5
    assert MT.confusion(y, y) == cm(5, 5, 0, 0)


def test_confusion_all_positive():
    assert MT.confusion([1, 0], [1, 1]) == cm(1, 0, 1, 0)


@pytest.mark.parametrize("y,p", [([], []), ([1, 0], [1]), ([2, 0], [1, 0])])
def test_confusion_errors(y, p):
    with pytest.raises(ValueError):
        MT.confusion(y, p)


# --- basic metrics -----------------------------------------------------------------

def test_perfect_classifier_all_ones():
    m = MT.basic_metrics(cm(4, 6, 0, 0))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    assert all(v == 1.0 for c in m.per_class.values() for v in (c.precision, c.recall, c.f1))


def test_hand_computed_example():
    m = MT.basic_metrics(cm(3, 5, 1, 1))
    assert (m.precision, m.recall, m.f1, m.accuracy) == (0.75, 0.75, 0.75, 0.8)


def test_zero_denominator_flagged():
    m = MT.class_metrics(cm(0, 5, 0, 3))
    assert m.precision == 0.0 and "precision" in m.undefined and "f1" in m.undefined
    assert m.recall == 0.0 and "recall" not in m.undefined


def test_accuracy_counts_true_negatives():
    # balanced perfect classifier must score 1, not 0.5
    assert MT.basic_metrics(cm(5, 5, 0, 0)).accuracy == 1.0


def brute(y, p):
    tp = sum(1 for a, b in zip(y, p) if a == 1 and b == 1)
    tn = sum(1 for a, b in zip(y, p) if a == 0 and b == 0)
    fp = sum(1 for a, b in zip(y, p) if a == 0 and b == 1)
    fn = sum(1 for a, b in zip(y, p) if a == 1 and b == 0)
    prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
    return (tp, tn, fp, fn), Fraction(tp + tn, len(y)), prec, rec, f1


@given(binary_pairs)
def test_matches_brute_force(pair):
    y, p = pair
    counts, acc, prec, rec, f1 = brute(y, p)
    c = MT.confusion(y, p)
    m = MT.basic_metrics(c)
    assert (c.tp, c.tn, c.fp, c.fn) == counts
    assert m.accuracy == float(acc) and m.precision == float(prec)
    assert m.recall == float(rec) and m.f1 == float(f1)


@given(binary_pairs)
def test_f1_harmonic_properties(pair):
    m = MT.class_metrics(MT.confusion(*pair))
    assert m.f1 <= (m.precision + m.recall) / 2 + 1e-15
    if m.precision == m.recall:
        assert m.f1 == m.precision


# --- averages -----------------------------------------------------------------------

def row(v, support):
    return MT.ClassMetrics(v, v, v, support)


def test_weighted_example():
    macro, weighted = MT.averages({"a": row(0.8, 3), "b": row(1.0, 1)})
    assert weighted["f1"] == pytest.approx(0.85, abs=1e-15)
    assert macro["f1"] == pytest.approx(0.9, abs=1e-15)


def test_equal_supports_macro_equals_weighted():
    macro, weighted = MT.averages({"a": row(0.3, 4), "b": row(0.9, 4)})
    assert macro == pytest.approx(weighted, abs=1e-15)


def test_single_class_average():
    macro, weighted = MT.averages({"a": row(0.37, 9)})
    assert macro["recall"] == weighted["recall"] == 0.37


# --- ROC -------------------------------------------------------------------------------

@pytest.mark.parametrize("scores,labels,auc", [
    ([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0], 1.0),
    ([0.5] * 6, [1, 0, 1, 0, 0, 1], 0.5),
    ([0.6, 0.4], [0, 1], 0.0),
])
def test_auc_examples(scores, labels, auc):
    assert MT.roc_auc(labels, scores)[1] == auc


def test_roc_starts_at_origin_and_ends_at_one():
    pts, _ = MT.roc_auc([1, 0, 1, 0], [0.3, 0.7, 0.9, 0.1])
    assert math.isinf(pts[0].threshold) and (pts[0].fpr, pts[0].tpr) == (0.0, 0.0)
    assert (pts[-1].fpr, pts[-1].tpr) == (1.0, 1.0)


def test_roc_needs_both_classes():
    with pytest.raises(ValueError):
        MT.roc_auc([1, 1], [0.2, 0.3])


def pairwise_auc(y, s):
    pos = [b for a, b in zip(y, s) if a == 1]
    neg = [b for a, b in zip(y, s) if a == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 8)), min_size=2, max_size=40)
       .filter(lambda xs: 0 < sum(a for a, _ in xs) < len(xs)))
def test_auc_matches_pairwise_with_ties(items):
    y = [a for a, _ in items]
    s = [b / 8 for _, b in items]
    pts, auc = MT.roc_auc(y, s)
    assert abs(auc - pairwise_auc(y, s)) <= 1e-9
    assert all(b.fpr >= a.fpr and b.tpr >= a.tpr for a, b in zip(pts, pts[1:]))


# --- report -------------------------------------------------------------------------------

def reference_cnn_report():
    per_class = {"No Accident": MT.ClassMetrics(0.82, 0.96, 0.88, 50),
                 "Accident": MT.ClassMetrics(0.96, 0.81, 0.88, 50)}
    avg = {"precision": 0.89, "recall": 0.88, "f1": 0.88}
    return MT.MetricsReport(per_class, avg, avg, 0.88, model="CNN")


def test_render_reproduces_reference_row():
    lines = MT.render_report(reference_cnn_report()).splitlines()
    assert lines[2].split() == "CNN No Accident 0.82 0.96 0.88".split()
    assert lines[3].split() == "Accident 0.96 0.81 0.88".split()
    assert lines[4].split() == "Weighted Avg 0.89 0.88 0.88".split()
    assert lines[0].split() == ["Model", "Class", "Precision", "Recall", "F1-Score"]


def test_render_all_ones():
    y = [0, 1, 0, 1]
    text = MT.render_report(MT.build_report(y, [0.1, 0.9, 0.2, 0.8]))
    cells = [tok for line in text.splitlines()[2:6] for tok in line.split() if tok[0].isdigit()]
    assert cells == ["1.00"] * 12
    assert "AUC: 1.00" in text and "TP=2 TN=2 FP=0 FN=0" in text


@pytest.mark.parametrize("v,s", [(0.125, "0.13"), (0.885, "0.89"), (0.8845, "0.88"), (1.0, "1.00"), (0.005, "0.01")])
def test_fmt2_half_up(v, s):
    assert MT.fmt2(v) == s


def test_build_report_single_class_has_no_auc():
    rep = MT.build_report([1, 1, 1], [0.9, 0.2, 0.8])
    assert rep.auc is None and rep.roc == []
    assert "No Accident.recall" in MT.render_report(rep)


def test_report_files_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=50)
    s = np.clip(y * 0.3 + rng.uniform(size=50) * 0.7, 0, 1)
    rep = MT.build_report(y, s, model="ViT")
    paths = MT.write_report(rep, tmp_path)
    assert sorted(p.name for p in paths) == ["report.json", "report.txt", "roc.csv"]
    back = MT.read_report(tmp_path / "report.json")
    assert back.model == "ViT" and back.confusion == rep.confusion
    assert abs(back.accuracy - rep.accuracy) <= 1e-12 and abs(back.auc - rep.auc) <= 1e-12
    for name, m in rep.per_class.items():
        for k in MT.METRIC_KEYS:
            assert abs(getattr(back.per_class[name], k) - getattr(m, k)) <= 1e-12
    assert back.roc == rep.roc
    json.loads((tmp_path / "report.json").read_text())
    assert (tmp_path / "roc.csv").read_text().splitlines()[1].startswith("inf,0.0,0.0")
