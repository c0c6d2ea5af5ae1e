"""Confusion counts, classification metrics, ROC/AUC and the text report."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

REPORT_CLASSES = ("No Accident", "Accident")
METRIC_KEYS = ("precision", "recall", "f1")
ACCURACY_FOOTER = "Accuracy = (TP + TN) / (TP + TN + FP + FN)"


def _binary(values, what):
    arr = np.asarray(values).reshape(-1)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{what} must be 0/1")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self):
        """Same matrix with class 0 treated as positive."""
        return ConfusionMatrix(self.tn, self.tp, self.fn, self.fp)


def confusion(labels, predictions):
    y, p = _binary(labels, "labels"), _binary(predictions, "predictions")
    if len(y) != len(p):
        raise ValueError(f"{len(y)} labels vs {len(p)} predictions")
    if len(y) == 0:
        raise ValueError("confusion matrix of an empty set")
    return ConfusionMatrix(int(np.sum((y == 1) & (p == 1))), int(np.sum((y == 0) & (p == 0))),
                           int(np.sum((y == 0) & (p == 1))), int(np.sum((y == 1) & (p == 0))))


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int = 0
    undefined: tuple = ()


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def class_metrics(cm):
    """Positive-class precision, recall and F1; zero denominators give 0 and a flag."""
    flags = []
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", flags)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", flags)
    # 2PR/(P+R) over integer counts; P + R == 0 exactly when tp == 0
    f1 = _ratio(2 * cm.tp, (2 * cm.tp + cm.fp + cm.fn) if cm.tp else 0, "f1", flags)
    return ClassMetrics(precision, recall, f1, cm.tp + cm.fn, tuple(flags))


@dataclass
class BasicMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict


def basic_metrics(cm, class_names=REPORT_CLASSES):
    if cm.total == 0:
        raise ValueError("metrics of an empty confusion matrix")
    pos = class_metrics(cm)
    per_class = {class_names[0]: class_metrics(cm.swapped()), class_names[1]: pos}
    return BasicMetrics((cm.tp + cm.tn) / cm.total, pos.precision, pos.recall, pos.f1, per_class)


def averages(per_class):
    """``(macro, weighted)`` dicts over precision/recall/f1."""
    rows = list(per_class.values())
    if not rows:
        raise ValueError("no classes to average")
    total = sum(r.support for r in rows)
    macro, weighted = {}, {}
    for k in METRIC_KEYS:
        vals = [getattr(r, k) for r in rows]
        macro[k] = math.fsum(vals) / len(vals)
        weighted[k] = math.fsum(v * r.support for v, r in zip(vals, rows)) / total if total else macro[k]
    return macro, weighted


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


def roc_auc(labels, scores):
    """ROC sweep over unique scores (descending) and its trapezoidal area.

    The first point sits at threshold ``inf`` (nothing predicted positive);
    tied scores move both rates at once, which gives ties half credit.
    """
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(y) != len(s):
        raise ValueError(f"{len(y)} labels vs {len(s)} scores")
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    points = [RocPoint(math.inf, 0.0, 0.0)]
    points += [RocPoint(float(s[i]), int(f) / n_neg, int(t) / n_pos) for i, t, f in zip(last, tps, fps)]
    # trapezoids on integer counts, normalised once
    t_all, f_all = np.r_[0, tps], np.r_[0, fps]
    area = np.sum((f_all[1:] - f_all[:-1]) * (t_all[1:] + t_all[:-1]))
    return points, float(area) / (2.0 * n_pos * n_neg)


@dataclass
class MetricsReport:
    per_class: dict
    weighted: dict
    macro: dict
    accuracy: float
    confusion: ConfusionMatrix = None
    roc: list = field(default_factory=list)
    auc: float = None
    model: str = ""


def build_report(labels, scores, predictions=None, model="", class_names=REPORT_CLASSES):
    """Everything the report needs from one evaluation pass."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if predictions is None:
        predictions = (scores >= 0.5).astype(np.int64)
    cm = confusion(labels, predictions)
    basic = basic_metrics(cm, class_names)
    macro, weighted = averages(basic.per_class)
    roc, auc = ([], None)
    if 0 < cm.tp + cm.fn < cm.total:
        roc, auc = roc_auc(labels, scores)
    return MetricsReport(basic.per_class, weighted, macro, basic.accuracy, cm, roc, auc, model)


def fmt2(value):
    """Two decimals, round half up on the shortest decimal repr."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


_COLS = (11, 13, 11, 9, 10)


def _row(model, name, values):
    cells = [f"{model:<{_COLS[0]}}{name:<{_COLS[1]}}"]
    cells += [f"{fmt2(v):>{w}}" for v, w in zip(values, _COLS[2:])]
    return "".join(cells).rstrip()


def render_report(report):
    """Fixed-width classification table followed by summary lines."""
    header = (f"{'Model':<{_COLS[0]}}{'Class':<{_COLS[1]}}"
              f"{'Precision':>{_COLS[2]}}{'Recall':>{_COLS[3]}}{'F1-Score':>{_COLS[4]}}")
    lines = [header, "-" * len(header)]
    model = report.model or "-"
    for name, m in report.per_class.items():
        lines.append(_row(model, name, (m.precision, m.recall, m.f1)))
        model = ""
    lines.append(_row("", "Weighted Avg", [report.weighted[k] for k in METRIC_KEYS]))
    lines.append(_row("", "Macro Avg", [report.macro[k] for k in METRIC_KEYS]))
    lines.append("")
    lines.append(f"Accuracy: {fmt2(report.accuracy)}")
    if report.auc is not None:
        lines.append(f"AUC: {fmt2(report.auc)}")
    if any(m.support for m in report.per_class.values()):
        lines.append("Support: " + ", ".join(f"{n}={m.support}" for n, m in report.per_class.items()))
    flagged = [f"{n}.{k}" for n, m in report.per_class.items() for k in m.undefined]
    if flagged:
        lines.append("Undefined (reported as 0): " + ", ".join(flagged))
    footer = ACCURACY_FOOTER
    if report.confusion is not None:
        c = report.confusion
        footer += f" with TP={c.tp} TN={c.tn} FP={c.fp} FN={c.fn}"
    lines.append(footer)
    return "\n".join(lines) + "\n"


def report_to_dict(report):
    out = {
        "model": report.model,
        "accuracy": report.accuracy,
        "per_class": {n: asdict(m) for n, m in report.per_class.items()},
        "macro": dict(report.macro),
        "weighted": dict(report.weighted),
        "confusion": asdict(report.confusion) if report.confusion else None,
        "auc": report.auc,
        "roc": [[None if math.isinf(p.threshold) else p.threshold, p.fpr, p.tpr] for p in report.roc],
    }
    for m in out["per_class"].values():
        m["undefined"] = list(m["undefined"])
    return out


def report_from_dict(d):
    per_class = {n: ClassMetrics(m["precision"], m["recall"], m["f1"], m["support"], tuple(m["undefined"]))
                 for n, m in d["per_class"].items()}
    roc = [RocPoint(math.inf if t is None else t, f, r) for t, f, r in d.get("roc", [])]
    cm = ConfusionMatrix(**d["confusion"]) if d.get("confusion") else None
    return MetricsReport(per_class, dict(d["weighted"]), dict(d["macro"]), d["accuracy"],
                         cm, roc, d.get("auc"), d.get("model", ""))


def write_roc_csv(points, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fpr", "tpr"))
        for p in points:
            w.writerow((repr(p.threshold), repr(p.fpr), repr(p.tpr)))


def write_report(report, out_dir):
    """``report.txt``, ``report.json`` (full precision) and ``roc.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(render_report(report))
    (out_dir / "report.json").write_text(json.dumps(report_to_dict(report), indent=2))
    paths = [out_dir / "report.txt", out_dir / "report.json"]
    if report.roc:
        write_roc_csv(report.roc, out_dir / "roc.csv")
        paths.append(out_dir / "roc.csv")
    return paths


def read_report(path):
    return report_from_dict(json.loads(Path(path).read_text()))
