"""Binary classification metrics: confusion matrix, accuracy, macro
precision/recall/F1, Cohen's kappa, one-vs-rest ROC curves and AUC.

Positive = class 1 (abnormal).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from shoulderx._io import atomic_write_text
from shoulderx.data import DataError, PredictionTable


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionMatrix":
        """The same matrix with classes 0 and 1 relabelled."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)

    def as_grid(self) -> list[list[int]]:
        """Rows = actual (negative, positive); columns = predicted."""
        return [[self.tn, self.fp], [self.fn, self.tp]]


def confusion(preds: PredictionTable) -> ConfusionMatrix:
    if len(preds) == 0:
        raise DataError("confusion matrix of an empty table")
    y = np.asarray(preds.labels)
    p = np.asarray(preds.predicted)
    return ConfusionMatrix(
        tp=int(((y == 1) & (p == 1)).sum()),
        tn=int(((y == 0) & (p == 0)).sum()),
        fp=int(((y == 0) & (p == 1)).sum()),
        fn=int(((y == 1) & (p == 0)).sum()),
    )


def _require_n(cm: ConfusionMatrix) -> int:
    if cm.n == 0:
        raise ValueError("metric undefined for an empty confusion matrix")
    return cm.n


def accuracy(cm: ConfusionMatrix) -> float:
    return (cm.tp + cm.tn) / _require_n(cm)


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} undefined (zero denominator); using 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return num / den


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float


def per_class_prf(cm: ConfusionMatrix) -> dict[int, ClassScores]:
    """Precision, recall and F1 with class 1 positive, and with roles swapped for class 0."""
    _require_n(cm)
    out = {}
    for cls, m in ((1, cm), (0, cm.swapped())):
        out[cls] = ClassScores(
            precision=_ratio(m.tp, m.tp + m.fp, f"class {cls} precision"),
            recall=_ratio(m.tp, m.tp + m.fn, f"class {cls} recall"),
            f1=_ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn, f"class {cls} F1"),
        )
    return out


def macro_prf(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Unweighted two-class mean of precision, recall and F1."""
    pc = per_class_prf(cm)
    return (
        (pc[0].precision + pc[1].precision) / 2,
        (pc[0].recall + pc[1].recall) / 2,
        (pc[0].f1 + pc[1].f1) / 2,
    )


def chance_agreement(cm: ConfusionMatrix) -> float:
    n = _require_n(cm)
    p_pos = (cm.tp + cm.fp) * (cm.tp + cm.fn) / n ** 2
    p_neg = (cm.fn + cm.tn) * (cm.fp + cm.tn) / n ** 2
    return p_pos + p_neg


def cohens_kappa(cm: ConfusionMatrix) -> float:
    p0 = accuracy(cm)
    pe = chance_agreement(cm)
    if pe == 1.0:
        warnings.warn("kappa undefined (chance agreement is 1); using 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return (p0 - pe) / (1.0 - pe)


@dataclass(frozen=True)
class RocCurve:
    """Points ordered by decreasing threshold, from (0, 0) to (1, 1).

    ``thresholds[0]`` is +inf (nothing predicted positive). Counts are kept
    so the area can be computed exactly.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    fp_counts: np.ndarray
    tp_counts: np.ndarray
    n_pos: int
    n_neg: int


def roc_curve(scores, labels, target_class: int = 1) -> RocCurve:
    """One-vs-rest ROC of ``scores`` as a detector for ``target_class``.

    A sample is called positive when its score >= threshold; thresholds are
    the distinct score values, so tied samples move together.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos = np.asarray(labels).reshape(-1) == target_class
    if scores.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs samples of both the target class and the rest")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(pos[order])
    fp = np.cumsum(~pos[order])
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp_c = np.r_[0, tp[last_of_group]]
    fp_c = np.r_[0, fp[last_of_group]]
    thr = np.r_[np.inf, s[last_of_group]]
    return RocCurve(thr, fp_c / n_neg, tp_c / n_pos, fp_c, tp_c, n_pos, n_neg)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve, accumulated on integer counts."""
    dfp = np.diff(curve.fp_counts)
    tp_sum = curve.tp_counts[1:] + curve.tp_counts[:-1]
    twice_area = int(np.dot(dfp, tp_sum))
    return twice_area / (2 * curve.n_pos * curve.n_neg)


@dataclass(frozen=True)
class MetricsReport:
    cm: ConfusionMatrix
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    kappa: float
    auc_class0: float
    auc_class1: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cm"] = asdict(self.cm)
        d["n"] = self.cm.n
        return d

    def to_text(self) -> str:
        cm = self.cm
        return "\n".join([
            f"n: {cm.n}",
            f"tp: {cm.tp}", f"tn: {cm.tn}", f"fp: {cm.fp}", f"fn: {cm.fn}",
            f"accuracy: {self.accuracy:.4f}",
            f"macro_precision: {self.macro_precision:.4f}",
            f"macro_recall: {self.macro_recall:.4f}",
            f"macro_f1: {self.macro_f1:.4f}",
            f"kappa: {self.kappa:.4f}",
            f"auc_class0: {self.auc_class0:.4f}",
            f"auc_class1: {self.auc_class1:.4f}",
            "",
            "                  pred negative  pred positive",
            f"actual negative   {cm.tn:13d}  {cm.fp:13d}",
            f"actual positive   {cm.fn:13d}  {cm.tp:13d}",
        ]) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def full_report(preds: PredictionTable) -> MetricsReport:
    cm = confusion(preds)
    p, r, f = macro_prf(cm)
    scores = preds.scores.astype(np.float64)
    return MetricsReport(
        cm=cm,
        accuracy=accuracy(cm),
        macro_precision=p,
        macro_recall=r,
        macro_f1=f,
        kappa=cohens_kappa(cm),
        auc_class0=auc(roc_curve(scores[:, 0], preds.labels, 0)),
        auc_class1=auc(roc_curve(scores[:, 1], preds.labels, 1)),
    )


# -- ROC export ------------------------------------------------------------

def format_roc_csv(curve: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
        lines.append(f"{'inf' if np.isinf(t) else format(float(t), '.9g')},{x:.9g},{y:.9g}")
    return "\n".join(lines) + "\n"


def write_roc_csv(curve: RocCurve, path) -> None:
    atomic_write_text(path, format_roc_csv(curve))


_CURVE_COLORS = ("#1f77b4", "#d62728")


def roc_svg(curves: dict[str, RocCurve], title: str = "ROC") -> str:
    """A static SVG with one polyline per curve and an AUC legend.

    Output depends only on the curves, so reruns are byte-identical.
    """
    size, pad = 400, 50
    span = size - 2 * pad

    def pt(x, y):
        return f"{pad + x * span:.2f},{size - pad - y * span:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<text x="{size / 2:.0f}" y="25" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<polyline points="{pt(0, 0)} {pt(1, 1)}" fill="none" stroke="gray" stroke-dasharray="4 4"/>',
        f'<text x="{size / 2:.0f}" y="{size - 15}" text-anchor="middle" font-family="sans-serif" font-size="12">False positive rate</text>',
        f'<text x="15" y="{size / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 15 {size / 2:.0f})">True positive rate</text>',
    ]
    for k, (name, curve) in enumerate(curves.items()):
        color = _CURVE_COLORS[k % len(_CURVE_COLORS)]
        pts = " ".join(pt(x, y) for x, y in zip(curve.fpr, curve.tpr))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = size - pad - 12 - 16 * (len(curves) - 1 - k)
        out.append(f'<line x1="{size - pad - 150}" y1="{ly - 4}" x2="{size - pad - 130}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{size - pad - 125}" y="{ly}" font-family="sans-serif" font-size="11">{name} (AUC = {auc(curve):.4f})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
