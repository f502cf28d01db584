"""AUROC, ROC curves, micro-averaged F1 and the evaluation report.

AUROC is computed as the Mann-Whitney statistic over average ranks, which
counts a tied positive/negative pair as half a correct ordering.  Metrics that
are undefined for the given labels (e.g. AUROC with a single class present)
raise :class:`UndefinedMetricError`; the evaluation report records them as
``None`` rather than a placeholder number.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .exceptions import ShapeError, UndefinedMetricError, ValidationError

__all__ = [
    "auroc",
    "micro_auroc",
    "roc_points",
    "trapezoid_area",
    "f1_micro",
    "F1Result",
    "best_f1_threshold",
    "EvalReport",
    "evaluate",
]


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise ValidationError("scores contain NaN")
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC is undefined unless both classes are present")
    return s, y, n_pos, n_neg


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s, y, n_pos, n_neg = _binary_inputs(scores, labels)
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def micro_auroc(scores, labels) -> float:
    """AUROC over all (report, class) cells pooled into one ranking."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ShapeError(f"score matrix {s.shape} does not match label matrix {y.shape}")
    return auroc(s.ravel(), y.ravel())


def roc_points(scores, labels):
    """``(thresholds, fpr, tpr)`` with one point per distinct score, from (0,0) to (1,1).

    ``thresholds[0]`` is ``+inf`` (nothing predicted positive).
    """
    s, y, n_pos, n_neg = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return thresholds, fpr, tpr


def trapezoid_area(fpr, tpr) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass(frozen=True)
class F1Result:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    degenerate: bool

    def __float__(self):
        return self.f1


def _f1_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    degenerate = tp == 0
    f1 = 0.0 if denom == 0 else 2 * tp / denom
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return F1Result(f1, precision, recall, int(tp), int(fp), int(fn), bool(degenerate))


def f1_micro(predicted, actual) -> F1Result:
    """Micro F1 pooled over every cell: ``2TP / (2TP + FP + FN)``.

    A zero denominator or zero true positives sets ``degenerate``; the value
    is 0 in that case (``float(result)`` gives the score).
    """
    p = np.asarray(predicted)
    a = np.asarray(actual)
    if p.shape != a.shape:
        raise ShapeError(f"predicted {p.shape} vs actual {a.shape}")
    p = p.astype(bool)
    a = a.astype(bool)
    tp = int(np.sum(p & a))
    fp = int(np.sum(p & ~a))
    fn = int(np.sum(~p & a))
    return _f1_counts(tp, fp, fn)


def best_f1_threshold(scores, labels):
    """Threshold on pooled scores that maximises micro F1; returns ``(threshold, f1)``."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    best = (0.5, -1.0)
    for t in np.unique(s):
        f1 = f1_micro(s >= t, y).f1
        if f1 > best[1]:
            best = (float(t), f1)
    return best


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


@dataclass
class EvalReport:
    classes: list
    n_examples: int
    threshold: float
    per_class: dict = field(default_factory=dict)
    micro: dict = field(default_factory=dict)
    roc: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def write_roc_csv(self, path, which="micro"):
        curve = self.roc.get(which)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            if curve is None:
                return
            for t, f, r in zip(curve["threshold"], curve["fpr"], curve["tpr"]):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])


def _curve(scores, labels):
    pts = _maybe(roc_points, scores, labels)
    if pts is None:
        return None
    t, f, r = pts
    return {"threshold": [float(x) for x in t], "fpr": [float(x) for x in f], "tpr": [float(x) for x in r]}


def evaluate(scores, labels, classes, threshold=0.5) -> EvalReport:
    """Per-class and micro-averaged AUROC/F1 plus ROC points."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape or s.shape[1] != len(classes):
        raise ShapeError(f"scores {s.shape}, labels {y.shape}, {len(classes)} classes")
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    pred = s >= threshold
    report = EvalReport(classes=list(classes), n_examples=int(s.shape[0]), threshold=float(threshold))
    for j, c in enumerate(classes):
        f1 = f1_micro(pred[:, j], y[:, j])
        report.per_class[c] = {
            "auc": _maybe(auroc, s[:, j], y[:, j]),
            "f1": f1.f1,
            "precision": f1.precision,
            "recall": f1.recall,
            "support": int(y[:, j].sum()),
            "f1_degenerate": f1.degenerate,
        }
        report.roc[c] = _curve(s[:, j], y[:, j])
    f1 = f1_micro(pred, y)
    best_t, best_f1 = best_f1_threshold(s, y)
    report.micro = {
        "auc": _maybe(micro_auroc, s, y),
        "f1": f1.f1,
        "precision": f1.precision,
        "recall": f1.recall,
        "f1_degenerate": f1.degenerate,
        "best_f1_threshold": best_t,
        "best_f1": best_f1,
    }
    report.roc["micro"] = _curve(s.ravel(), y.ravel())
    return report
