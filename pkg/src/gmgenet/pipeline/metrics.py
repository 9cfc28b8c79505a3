"""Classification metrics, ROC/AUC and the paired t-test used to compare models."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return float(Fraction(self.tp + self.tn, self.n))

    @property
    def sensitivity(self) -> float:
        if self.tp + self.fn == 0:
            raise UndefinedMetricError("sensitivity is undefined without positive samples")
        return float(Fraction(self.tp, self.tp + self.fn))

    @property
    def specificity(self) -> float:
        if self.tn + self.fp == 0:
            raise UndefinedMetricError("specificity is undefined without negative samples")
        return float(Fraction(self.tn, self.tn + self.fp))


def _binary(x, name: str) -> np.ndarray:
    a = np.asarray(x).astype(int).ravel()
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return a


def confusion(preds, labels) -> Confusion:
    p, y = _binary(preds, "preds"), _binary(labels, "labels")
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"preds and labels need equal non-zero length, got {p.size} and {y.size}")
    return Confusion(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


def confusion_metrics(preds, labels):
    """(accuracy, sensitivity, specificity, TP, FP, TN, FN)."""
    c = confusion(preds, labels)
    return c.accuracy, c.sensitivity, c.specificity, c.tp, c.fp, c.tn, c.fn


def roc_curve(scores, labels) -> np.ndarray:
    """ROC points as rows of (threshold, fpr, tpr), from (inf, 0, 0) to (min score, 1, 1).

    Predicting positive means ``score >= threshold``; tied scores share one point.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels, "labels")
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    thresholds = np.r_[np.inf, s[last]]
    fpr = np.r_[0.0, fps[last] / n_neg]
    tpr = np.r_[0.0, tps[last] / n_pos]
    return np.stack([thresholds, fpr, tpr], axis=1)


def roc_auc(scores, labels) -> tuple[float, np.ndarray]:
    """Area under the ROC (trapezoidal, so ties count one half) and its points."""
    pts = roc_curve(scores, labels)
    fpr, tpr = pts[:, 1], pts[:, 2]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, pts


# two-sided critical values t_{1 - alpha/2, df} for df = 1..29
T_CRITICAL = {
    0.10: (6.313752, 2.919986, 2.353363, 2.131847, 2.015048, 1.94318, 1.894579, 1.859548, 1.833113, 1.812461,
           1.795885, 1.782288, 1.770933, 1.76131, 1.75305, 1.745884, 1.739607, 1.734064, 1.729133, 1.724718,
           1.720743, 1.717144, 1.713872, 1.710882, 1.708141, 1.705618, 1.703288, 1.701131, 1.699127),
    0.05: (12.706205, 4.302653, 3.182446, 2.776445, 2.570582, 2.446912, 2.364624, 2.306004, 2.262157, 2.228139,
           2.200985, 2.178813, 2.160369, 2.144787, 2.13145, 2.119905, 2.109816, 2.100922, 2.093024, 2.085963,
           2.079614, 2.073873, 2.068658, 2.063899, 2.059539, 2.055529, 2.051831, 2.048407, 2.04523),
    0.01: (63.656741, 9.924843, 5.840909, 4.604095, 4.032143, 3.707428, 3.499483, 3.355387, 3.249836, 3.169273,
           3.105807, 3.05454, 3.012276, 2.976843, 2.946713, 2.920782, 2.898231, 2.87844, 2.860935, 2.84534,
           2.83136, 2.818756, 2.807336, 2.79694, 2.787436, 2.778715, 2.770683, 2.763262, 2.756386),
}


def t_critical(alpha: float, df: int) -> float:
    table = T_CRITICAL.get(round(alpha, 10))
    if table is None or not 1 <= df <= len(table):
        raise ValueError(f"no tabulated critical value for alpha={alpha}, df={df}")
    return table[df - 1]


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    critical: float
    reject: bool


def paired_t_test(a, b, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on per-fold scores ``a`` vs ``b``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_t_test needs two equal-length vectors with at least 2 entries")
    d = a - b
    k = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateTestError("all paired differences are identical; the t statistic is undefined")
    t = float(d.mean() / (sd / np.sqrt(k)))
    crit = t_critical(alpha, k - 1)
    return TTestResult(t, k - 1, crit, abs(t) > crit)
