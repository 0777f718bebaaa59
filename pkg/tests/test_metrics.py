import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.stats.weightstats import DescrStatsW

from cass.errors import ContractError
from cass.metrics import MetricReport, balanced_accuracy, ci95, f1_macro


def confusion(pred, target, k):
    m = [[0] * k for _ in range(k)]
    for p, t in zip(pred, target):
        m[t][p] += 1
    return m


def oracle_f1(pred, target, k):
    m = confusion(pred, target, k)
    scores = []
    for c in range(k):
        tp = m[c][c]
        fp = sum(m[r][c] for r in range(k)) - tp
        fn = sum(m[c]) - tp
        if 2 * tp + fp + fn:
            scores.append(2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


def oracle_bacc(pred, target, k):
    m = confusion(pred, target, k)
    recalls = [m[c][c] / sum(m[c]) for c in range(k) if sum(m[c])]
    return sum(recalls) / len(recalls)


def test_matches_confusion_matrix_oracle_on_500_instances():
    rng = np.random.default_rng(7)
    for _ in range(500):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 30))
        pred = rng.integers(0, k, n)
        target = rng.integers(0, k, n)
        assert f1_macro(pred, target, num_classes=k).value == oracle_f1(pred, target, k)
        assert balanced_accuracy(pred, target, num_classes=k).value == oracle_bacc(pred, target, k)


def test_worked_matrix():
    # rows are targets, columns predictions
    m = [[2, 1, 0], [0, 2, 0], [1, 0, 1]]
    target = [r for r in range(3) for c in range(3) for _ in range(m[r][c])]
    pred = [c for r in range(3) for c in range(3) for _ in range(m[r][c])]
    f1 = f1_macro(pred, target)
    assert f1.per_class == pytest.approx({0: 2 / 3, 1: 0.8, 2: 2 / 3})
    assert balanced_accuracy(pred, target).value == pytest.approx((2 / 3 + 1 + 0.5) / 3)


def test_majority_predictor():
    target = [0] * 90 + [1] * 10
    pred = [0] * 100
    assert balanced_accuracy(pred, target).value == 0.5
    assert f1_macro(pred, target).value == pytest.approx((180 / 190 + 0) / 2)
    assert f1_macro([1, 1], [1, 1], num_classes=3).excluded == [0, 2]


def test_multilabel_f1():
    t = np.array([[1, 0], [1, 1], [0, 1]])
    p = np.array([[1, 0], [0, 1], [0, 0]])
    # column 0: tp1 fn1 -> 2/3; column 1: tp1 fn1 -> 2/3
    assert f1_macro(p, t, task_kind="multilabel").value == pytest.approx(2 / 3)


def test_metric_errors_and_round_trip():
    with pytest.raises(ContractError):
        f1_macro([0, 1], [0])
    with pytest.raises(ContractError):
        f1_macro([], [])
    rep = f1_macro([0, 1, 1], [0, 1, 0])
    assert MetricReport.from_dict(rep.to_dict()) == rep


def mp_t_quantile(p, dof):
    # invert the regularised incomplete beta form of the Student-t CDF
    dof = mpmath.mpf(dof)

    def cdf(x):
        return 1 - mpmath.betainc(dof / 2, mpmath.mpf(1) / 2, 0, dof / (dof + x * x), regularized=True) / 2

    return mpmath.findroot(lambda x: cdf(x) - p, 2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=12))
def test_ci95_matches_statsmodels(values):
    mean, half = ci95(values)
    lo, hi = DescrStatsW(np.asarray(values)).tconfint_mean(alpha=0.05)
    assert mean == pytest.approx(np.mean(values), abs=1e-12)
    if np.std(values) < 1e-12:
        assert half == 0.0
    else:
        assert abs(half - (hi - lo) / 2) < 1e-9


@pytest.mark.parametrize("values", [[0.0, 1.0], [0.8, 0.82, 0.79, 0.85, 0.81], [1, 2, 3, 4, 5, 6, 7]])
def test_ci95_matches_arbitrary_precision(values):
    n = len(values)
    sd = mpmath.sqrt(sum((mpmath.mpf(v) - mpmath.mpf(sum(values)) / n) ** 2 for v in values) / (n - 1))
    expected = mp_t_quantile(mpmath.mpf("0.975"), n - 1) * sd / mpmath.sqrt(n)
    assert abs(ci95(values)[1] - float(expected)) < 1e-9


def test_ci95_two_point_value():
    assert ci95([0, 1])[1] == pytest.approx(12.706204736 * math.sqrt(0.5) / math.sqrt(2), abs=1e-8)
    assert ci95([0.7] * 5) == (pytest.approx(0.7), 0.0)
    with pytest.raises(ContractError):
        ci95([1.0])
