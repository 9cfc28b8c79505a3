import numpy as np
import pytest

from gmgenet.pipeline.metrics import (
    T_CRITICAL,
    Confusion,
    DegenerateTestError,
    UndefinedMetricError,
    confusion,
    confusion_metrics,
    paired_t_test,
    roc_auc,
    roc_curve,
    t_critical,
)
from oracles import counting_confusion, pairwise_auc


def from_counts(tp, tn, fp, fn):
    preds = [1] * tp + [0] * tn + [1] * fp + [0] * fn
    labels = [1] * tp + [0] * tn + [0] * fp + [1] * fn
    return preds, labels


class TestConfusion:
    def test_hand_values(self):
        acc, sens, spec, tp, fp, tn, fn = confusion_metrics(*from_counts(90, 85, 10, 15))
        assert (tp, fp, tn, fn) == (90, 10, 85, 15)
        assert acc == pytest.approx(0.875, abs=1e-6)
        assert sens == pytest.approx(0.857143, abs=1e-6)
        assert spec == pytest.approx(0.894737, abs=1e-6)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            preds, labels = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
            c = confusion(preds, labels)
            assert (c.tp, c.fp, c.tn, c.fn) == counting_confusion(preds.tolist(), labels.tolist())
            assert c.accuracy == pytest.approx((c.tp + c.tn) / n, abs=1e-12)

    def test_undefined(self):
        c = Confusion(tp=0, fp=2, tn=3, fn=0)
        with pytest.raises(UndefinedMetricError):
            c.sensitivity
        assert c.specificity == pytest.approx(0.6)
        with pytest.raises(UndefinedMetricError):
            Confusion(tp=2, fp=0, tn=0, fn=1).specificity

    def test_bad_input(self):
        with pytest.raises(ValueError):
            confusion([0, 2], [0, 1])
        with pytest.raises(ValueError):
            confusion([0, 1, 1], [0, 1])
        with pytest.raises(ValueError):
            confusion([], [])


class TestAUC:
    def test_hand_value(self):
        auc, _ = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert auc == pytest.approx(0.75, abs=1e-12)

    def test_inverted_labels(self):
        auc, _ = roc_auc([0.1, 0.4, 0.35, 0.8], [1, 1, 0, 0])
        assert auc == pytest.approx(0.25, abs=1e-12)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # coarse scores so ties occur often
            scores = rng.integers(0, 6, size=n) / 5.0
            auc, _ = roc_auc(scores, labels)
            assert auc == pytest.approx(pairwise_auc(scores.tolist(), labels.tolist()), abs=1e-12)

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(2, 25))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = rng.normal(size=n).round(1)
            a, _ = roc_auc(scores, labels)
            b, _ = roc_auc(scores, 1 - labels)
            assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_perfect_and_tied(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 1.0
        assert roc_auc([0.5] * 4, [0, 1, 0, 1])[0] == 0.5

    def test_curve_shape(self):
        pts = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert np.isinf(pts[0, 0]) and tuple(pts[0, 1:]) == (0.0, 0.0)
        assert tuple(pts[-1, 1:]) == (1.0, 1.0)
        assert np.all(np.diff(pts[:, 1]) >= 0) and np.all(np.diff(pts[:, 2]) >= 0)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.1, 0.2], [1, 1])


class TestPairedT:
    def test_hand_value(self):
        res = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        assert res.t == pytest.approx(3.4641, abs=1e-4)
        assert res.df == 2
        assert res.critical == pytest.approx(4.302653)
        assert not res.reject

    def test_sign_and_rejection(self):
        a = [0.90, 0.92, 0.91, 0.93, 0.90]
        b = [0.80, 0.81, 0.79, 0.82, 0.80]
        res = paired_t_test(a, b)
        assert res.t > 0 and res.reject
        assert paired_t_test(b, a).t == pytest.approx(-res.t)

    def test_degenerate(self):
        with pytest.raises(DegenerateTestError):
            paired_t_test([1.0, 2.0], [0.0, 1.0])

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [0.0])
        with pytest.raises(ValueError):
            paired_t_test([1.0, 2.0], [0.0])

    def test_table_matches_distribution(self):
        stats = pytest.importorskip("scipy.stats")
        for alpha, table in T_CRITICAL.items():
            for df, value in enumerate(table, start=1):
                assert value == pytest.approx(stats.t.ppf(1 - alpha / 2, df), abs=1e-5)
        with pytest.raises(ValueError):
            t_critical(0.2, 4)
        with pytest.raises(ValueError):
            t_critical(0.05, 0)
