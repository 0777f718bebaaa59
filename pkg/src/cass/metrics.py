"""Classification metrics and seed-level confidence intervals."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from cass.errors import ContractError


@dataclass
class MetricReport:
    metric_name: str
    value: float
    per_class: dict[int, float]
    n_samples: int
    excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["metric_name"], d["value"], {int(k): v for k, v in d["per_class"].items()},
                   d["n_samples"], list(d.get("excluded", [])))


def _as_arrays(predictions, targets):
    p, t = np.asarray(predictions), np.asarray(targets)
    if p.shape != t.shape:
        raise ContractError(f"predictions {p.shape} and targets {t.shape} differ in shape")
    if p.size == 0:
        raise ContractError("empty input")
    return p, t


def f1_macro(predictions, targets, task_kind: str = "multiclass", num_classes: int | None = None) -> MetricReport:
    """Unweighted mean over classes of ``2TP / (2TP + FP + FN)``.

    Classes with no support in either predictions or targets (zero
    denominator) are left out of the mean and listed in ``excluded``.
    Multilabel input is ``(N, C)`` binary indicators, one binary problem per
    column.
    """
    p, t = _as_arrays(predictions, targets)
    if task_kind == "multilabel":
        p, t = p.astype(bool), t.astype(bool)
        tp = (p & t).sum(0)
        fp = (p & ~t).sum(0)
        fn = (~p & t).sum(0)
        n_cls = t.shape[1]
    else:
        p, t = p.astype(int), t.astype(int)
        n_cls = num_classes if num_classes is not None else int(max(p.max(), t.max())) + 1
        tp = np.array([np.sum((p == c) & (t == c)) for c in range(n_cls)])
        fp = np.array([np.sum((p == c) & (t != c)) for c in range(n_cls)])
        fn = np.array([np.sum((p != c) & (t == c)) for c in range(n_cls)])
    per_class, excluded = {}, []
    for c in range(n_cls):
        denom = 2 * tp[c] + fp[c] + fn[c]
        if denom == 0:
            excluded.append(c)
        else:
            per_class[c] = float(2 * tp[c] / denom)
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MetricReport("f1_macro", value, per_class, int(len(t)), excluded)


def balanced_accuracy(predictions, targets, num_classes: int | None = None) -> MetricReport:
    """Unweighted mean of per-class recall over classes present in ``targets``."""
    p, t = _as_arrays(predictions, targets)
    p, t = p.astype(int), t.astype(int)
    if p.ndim != 1:
        raise ContractError("balanced accuracy is defined for multiclass labels only")
    n_cls = num_classes if num_classes is not None else int(max(p.max(), t.max())) + 1
    per_class, excluded = {}, []
    for c in range(n_cls):
        support = np.sum(t == c)
        if support == 0:
            excluded.append(c)
        else:
            per_class[c] = float(np.sum((p == c) & (t == c)) / support)
    return MetricReport("balanced_accuracy", float(np.mean(list(per_class.values()))), per_class, int(len(t)), excluded)


def ci95(values) -> tuple[float, float]:
    """Mean and half-width of the two-sided 95% Student-t interval (n-1 dof)."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) < 2:
        raise ContractError("ci95 needs at least two values")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    if sd == 0.0:
        return mean, 0.0
    return mean, float(stats.t.ppf(0.975, len(v) - 1) * sd / math.sqrt(len(v)))
