import numpy as np
import pytest
import scipy.sparse as sp
from sklearn.base import clone

from nmfrisk.cohort import CohortMatrix
from nmfrisk.exceptions import DataError, InvalidParameterError
from nmfrisk.validation import (
    LogisticGD,
    MetricSummary,
    classification_metrics,
    jaccard_topk,
    label_quality_experiment,
    score_summary,
    top_k_covariates,
)


def _cohort(dense, codes, diagnosed=True):
    X = sp.csr_matrix(np.asarray(dense, dtype=np.uint32))
    return CohortMatrix(X, tuple(codes), tuple(f"p{i}" for i in range(X.shape[0])),
                        np.full(X.shape[0], diagnosed))


def test_confusion_matrix_hand_case():
    # TP=40 FN=20 FP=10 TN=30
    y = np.r_[np.ones(60, int), np.zeros(40, int)]
    p = np.r_[np.ones(40), np.zeros(20), np.ones(10), np.zeros(30)]
    m = classification_metrics(y, p)
    assert m["accuracy"] == pytest.approx(0.7)
    assert m["f1"] == pytest.approx(80 / 110, abs=1e-12)
    assert m["mcc"] == pytest.approx((40 * 30 - 10 * 20) / np.sqrt(50 * 60 * 40 * 50), abs=1e-12)
    assert m["mcc"] == pytest.approx(0.4082, abs=1e-4)


def test_auc_and_brier_small_case():
    m = classification_metrics([0, 0, 1, 1], [0.1, 0.6, 0.4, 0.9])
    assert m["auc_roc"] == pytest.approx(0.75)
    assert m["brier"] == pytest.approx((0.01 + 0.36 + 0.36 + 0.01) / 4)


def test_score_summary():
    s = score_summary([0.1, 0.5, 0.9, 0.3], "x")
    assert (s.mean, s.median, s.maximum, s.count) == (pytest.approx(0.45), pytest.approx(0.4), 0.9, 4)
    with pytest.raises(DataError):
        score_summary([], "empty")


def test_top_k_ties_to_lower_index():
    np.testing.assert_array_equal(top_k_covariates(np.array([3, 5, 3, 5, 1]), 3), [1, 3, 0])


def test_jaccard_hand_case():
    a = _cohort([[1, 1, 1, 0], [1, 1, 0, 0]], "ABCD")
    b = _cohort([[0, 1, 1, 1], [0, 0, 1, 1]], "ABCD")
    # a: A=2 B=2 C=1; b: C=2 D=2 B=1
    curve = jaccard_topk(a, b, [1, 2, 3], "a", "b")
    assert curve.jaccard == pytest.approx((0.0, 0.0, 0.5))
    assert curve.pair_label == "a|b"
    with pytest.raises(InvalidParameterError):
        jaccard_topk(a, b, [2, 1])


def test_jaccard_matches_codes_across_dictionaries():
    a = _cohort([[1, 0]], "XY")
    b = _cohort([[0, 1]], "YX")
    assert jaccard_topk(a, b, [1]).jaccard == (1.0,)


def test_metric_summary_interval():
    s = MetricSummary.from_values([1.0, 2.0, 3.0])
    assert s.mean == 2.0
    assert s.ci_high - s.mean == pytest.approx(1.96 * 1.0 / np.sqrt(3))
    single = MetricSummary.from_values([0.5])
    assert single.ci_low == single.ci_high == 0.5


def test_logistic_gd_separable():
    g = np.random.default_rng(0)
    X = np.r_[g.normal(2, 0.5, (50, 2)), g.normal(-2, 0.5, (50, 2))]
    y = np.r_[np.ones(50), np.zeros(50)]
    clf = LogisticGD(n_epochs=50).fit(X, y)
    assert clf.score(X, y) == 1.0
    np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)
    assert clone(clf).get_params()["n_epochs"] == 50
    with pytest.raises(DataError):
        LogisticGD().fit(X, np.ones(100))


def _experiment_inputs():
    g = np.random.default_rng(1)
    pos = (g.random((40, 6)) < np.r_[[0.9] * 3, [0.1] * 3]).astype(np.uint32)
    neg = (g.random((200, 6)) < np.r_[[0.1] * 3, [0.1] * 3]).astype(np.uint32)
    scores = g.random(200)
    return _cohort(pos, "ABCDEF"), _cohort(neg, "ABCDEF", False), scores


def test_label_quality_is_seeded_and_paired():
    d, u, scores = _experiment_inputs()
    a = label_quality_experiment(d, u, scores, ["A", "B", "C"], (0.5, 1.0), n_repeats=2, n_folds=3,
                                 seed=5, classifier_params={"n_epochs": 20})
    b = label_quality_experiment(d, u, scores, ["A", "B", "C"], (0.5, 1.0), n_repeats=2, n_folds=3,
                                 seed=5, classifier_params={"n_epochs": 20})
    assert a == b
    assert [r.n_negatives_available for r in a.rows] == [int((scores <= 0.5).sum()), 200]
    # identical pools draw identical negatives
    c = label_quality_experiment(d, u, scores, ["A"], (1.0, 1.0), n_repeats=2, n_folds=3, seed=5,
                                 classifier_params={"n_epochs": 5})
    assert c.rows[0].metrics == c.rows[1].metrics


def test_label_quality_names_short_threshold():
    d, u, scores = _experiment_inputs()
    with pytest.raises(InvalidParameterError, match="threshold 0.01"):
        label_quality_experiment(d, u, scores, ["A"], (0.01,), n_repeats=1, n_folds=2)
    with pytest.raises(DataError):
        label_quality_experiment(d, u, scores[:5], ["A"])
