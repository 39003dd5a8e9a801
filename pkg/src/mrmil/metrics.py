"""Slide-level evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import InputError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true, cols = predicted
    class_names: tuple[str, ...] = ()

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int, class_names=()) -> "ConfusionMatrix":
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(cm, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        names = list(self.class_names) or [str(i) for i in range(len(self.counts))]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def kappa(cm, weighting: str = "none", flags: list | None = None) -> float:
    """Cohen's kappa; ``weighting`` is ``"none"``, ``"linear"`` or ``"quadratic"``."""
    O = np.asarray(getattr(cm, "counts", cm), dtype=np.float64)
    total = O.sum()
    if total <= 0:
        raise InputError("kappa needs a non-empty confusion matrix")
    n = O.shape[0]
    rows = O.sum(axis=1)
    cols = O.sum(axis=0)
    if weighting == "none":
        p_o = np.trace(O) / total
        p_e = float(rows @ cols) / total ** 2
        if p_e >= 1.0:
            if flags is not None:
                flags.append("kappa_degenerate")
            return 0.0
        return float((p_o - p_e) / (1.0 - p_e))
    if weighting not in ("linear", "quadratic"):
        raise InputError(f"unknown kappa weighting {weighting!r}")
    i, j = np.indices((n, n))
    if n < 2:
        if flags is not None:
            flags.append("kappa_degenerate")
        return 0.0
    w = np.abs(i - j) / (n - 1) if weighting == "linear" else (i - j) ** 2 / (n - 1) ** 2
    E = np.outer(rows, cols) / total
    denom = float((w * E).sum())
    if denom <= 0.0:
        if flags is not None:
            flags.append("kappa_degenerate")
        return 0.0
    return float(1.0 - (w * O).sum() / denom)


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise InputError("scores and labels must have the same length")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form: P(s+ > s-) + P(s+ == s-)/2, via average ranks."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("roc_auc is undefined unless both classes are present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s, y):
    """Cumulative (tp, fp) at each unique score, highest first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64)


def roc_curve(scores, labels):
    s, y = _check_binary(scores, labels)
    tp, fp = _threshold_counts(s, y)
    tpr = np.r_[0.0, tp / max(tp[-1], 1)]
    fpr = np.r_[0.0, fp / max(fp[-1], 1)]
    return fpr, tpr


def roc_auc_trapezoid(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def average_precision(scores, labels) -> float:
    """Sum over descending thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _check_binary(scores, labels)
    if not y.any():
        raise InputError("average_precision is undefined without positives")
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class MetricsReport:
    accuracy: float
    kappa_linear: float
    kappa_quadratic: float
    kappa: float
    auroc: float | None
    ap: float | None
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    n: int = 0
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def cancer_score(probs: np.ndarray) -> np.ndarray:
    """P(class != BN): the malignant probability for binary tasks, the sum of
    all non-benign classes otherwise (class 0 is benign)."""
    probs = np.asarray(probs, dtype=np.float64)
    return 1.0 - probs[:, 0]


def evaluate(y_true, probs, class_names=()) -> tuple[MetricsReport, ConfusionMatrix]:
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = probs.shape[1]
    y_pred = probs.argmax(axis=1)
    cm = ConfusionMatrix.from_labels(y_true, y_pred, n_classes, class_names)
    flags: list[str] = []
    C = cm.counts.astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(C.sum(axis=0) > 0, np.diag(C) / C.sum(axis=0), 0.0)
        rec = np.where(C.sum(axis=1) > 0, np.diag(C) / C.sum(axis=1), 0.0)
    malignant = y_true != 0
    score = cancer_score(probs)
    auroc = ap = None
    if malignant.any() and (~malignant).any():
        auroc = roc_auc(score, malignant)
        ap = average_precision(score, malignant)
    else:
        flags.append("detection_metrics_undefined")
    report = MetricsReport(
        accuracy=float(np.mean(y_pred == y_true)) if len(y_true) else float("nan"),
        kappa_linear=kappa(cm, "linear", flags),
        kappa_quadratic=kappa(cm, "quadratic", flags),
        kappa=kappa(cm, "none", flags),
        auroc=auroc, ap=ap,
        precision=[float(v) for v in prec], recall=[float(v) for v in rec],
        n=int(len(y_true)), flags=flags)
    return report, cm
