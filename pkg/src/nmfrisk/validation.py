"""Checks on scored cohorts.

* score summaries (mean / median / max of normalized scores per cohort),
* top-k covariate Jaccard similarity between two patient groups,
* the label-quality experiment: classifiers trained with negatives drawn
  below increasing risk thresholds should degrade as hidden positives leak
  into the negative class.
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import (
    accuracy_score,
    brier_score_loss,
    f1_score,
    matthews_corrcoef,
    roc_auc_score,
)
from sklearn.model_selection import StratifiedKFold
from sklearn.utils.validation import check_is_fitted

from .cohort import CohortMatrix
from .exceptions import DataError, InvalidParameterError
from .scoring import RiskProfile, presence_matrix

__all__ = [
    "ScoreSummary",
    "SimilarityCurve",
    "MetricSummary",
    "LabelQualityReport",
    "score_summary",
    "top_k_covariates",
    "jaccard_topk",
    "classification_metrics",
    "LogisticGD",
    "label_quality_experiment",
    "METRICS",
]

METRICS = ("accuracy", "mcc", "auc_roc", "brier", "f1")
Z_95 = 1.96


@dataclass(frozen=True)
class ScoreSummary:
    cohort_name: str
    mean: float
    median: float
    maximum: float
    count: int


def _scores(profiles) -> np.ndarray:
    profiles = list(profiles)
    if profiles and isinstance(profiles[0], RiskProfile):
        return np.array([p.normalized_score for p in profiles], dtype=np.float64)
    return np.asarray(profiles, dtype=np.float64)


def score_summary(profiles, name: str) -> ScoreSummary:
    """Accepts :class:`RiskProfile` objects or bare normalized scores."""
    s = _scores(profiles)
    if s.size == 0:
        raise DataError(f"cannot summarize empty cohort {name!r}")
    return ScoreSummary(name, math.fsum(s) / s.size, float(np.median(s)), float(s.max()), int(s.size))


# -- top-k similarity -------------------------------------------------------


@dataclass(frozen=True)
class SimilarityCurve:
    ks: tuple[int, ...]
    jaccard: tuple[float, ...]
    group_a: str = "a"
    group_b: str = "b"

    @property
    def pair_label(self) -> str:
        return f"{self.group_a}|{self.group_b}"


def _frequencies(m: CohortMatrix, universe: dict[str, int]) -> np.ndarray:
    counts = np.bincount(m.X.indices[m.X.data > 0], minlength=m.n_covariates)
    out = np.zeros(len(universe), dtype=np.int64)
    for code, j in m.covariate_dict.items():
        out[universe[code]] = counts[j]
    return out


def top_k_covariates(freq: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest frequencies, ties to the lower index."""
    order = np.lexsort((np.arange(freq.size), -freq))
    return order[:k]


def jaccard_topk(a: CohortMatrix, b: CohortMatrix, k_list: Sequence[int],
                 group_a: str = "a", group_b: str = "b") -> SimilarityCurve:
    """Jaccard index of the ``k`` most frequent covariates in ``a`` and ``b``.

    Frequency counts patients with the covariate present. Covariates are
    matched by code; the shared index order is ``a``'s dictionary followed
    by codes only ``b`` knows.
    """
    if a.n_patients == 0 or b.n_patients == 0:
        raise DataError("jaccard_topk needs two non-empty cohorts")
    ks = tuple(int(k) for k in k_list)
    if any(y <= x for x, y in zip(ks, ks[1:])):
        raise InvalidParameterError("k values must be strictly increasing")
    universe = dict(a.covariate_dict)
    for code in b.covariates:
        universe.setdefault(code, len(universe))
    if ks and (ks[0] < 1 or ks[-1] > len(universe)):
        raise InvalidParameterError(f"k must lie in [1, {len(universe)}]")
    fa, fb = _frequencies(a, universe), _frequencies(b, universe)
    values = []
    for k in ks:
        sa, sb = set(top_k_covariates(fa, k).tolist()), set(top_k_covariates(fb, k).tolist())
        values.append(len(sa & sb) / len(sa | sb))
    return SimilarityCurve(ks, tuple(values), group_a, group_b)


def write_similarity_tsv(curves: Sequence[SimilarityCurve], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c in curves:
            for k, j in zip(c.ks, c.jaccard):
                fh.write(f"{k}\t{j!r}\t{c.pair_label}\n")


# -- classifier -------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticGD(ClassifierMixin, BaseEstimator):
    """L2-regularized logistic regression fit by mini-batch gradient descent."""

    def __init__(self, l2=1e-3, learning_rate=0.1, n_epochs=300, batch_size=256, random_state=0):
        self.l2 = l2
        self.learning_rate = learning_rate
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise DataError("LogisticGD needs exactly two classes")
        t = (y == self.classes_[1]).astype(np.float64)
        n, m = X.shape
        w = np.zeros(m)
        b = 0.0
        rng = np.random.Generator(np.random.Philox(self.random_state))
        bs = max(1, min(self.batch_size, n))
        for _ in range(self.n_epochs):
            order = rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                Xb = X[idx]
                g = _sigmoid(Xb @ w + b) - t[idx]
                w -= self.learning_rate * (Xb.T @ g / idx.size + self.l2 * w)
                b -= self.learning_rate * g.mean()
        self.coef_ = w[None, :]
        self.intercept_ = np.array([b])
        self.n_features_in_ = m
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=np.float64) @ self.coef_[0] + self.intercept_[0]

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


def classification_metrics(y_true, y_prob, threshold: float = 0.5) -> dict[str, float]:
    y_true = np.asarray(y_true).astype(int)
    y_prob = np.asarray(y_prob, dtype=np.float64)
    y_pred = (y_prob >= threshold).astype(int)
    return {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "mcc": float(matthews_corrcoef(y_true, y_pred)),
        "auc_roc": float(roc_auc_score(y_true, y_prob)),
        "brier": float(brier_score_loss(y_true, y_prob)),
        "f1": float(f1_score(y_true, y_pred, zero_division=0.0)),
    }


# -- label-quality experiment -----------------------------------------------


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    ci_low: float
    ci_high: float

    @classmethod
    def from_values(cls, values) -> MetricSummary:
        v = np.asarray(values, dtype=np.float64)
        mean = float(v.mean())
        half = Z_95 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
        return cls(mean, mean - half, mean + half)


@dataclass(frozen=True)
class LabelQualityRow:
    threshold: float
    n_negatives_available: int
    metrics: dict[str, MetricSummary]


@dataclass(frozen=True)
class LabelQualityReport:
    rows: tuple[LabelQualityRow, ...]
    n_repeats: int
    n_folds: int
    n_positives: int
    seed: int

    def mean(self, metric: str) -> list[float]:
        return [r.metrics[metric].mean for r in self.rows]


def _presence_features(m: CohortMatrix, codes: Sequence[str]) -> np.ndarray:
    return presence_matrix(m, codes).toarray()


def label_quality_experiment(diagnosed: CohortMatrix, undiagnosed: CohortMatrix, undiagnosed_scores,
                             selected_codes: Sequence[str], thresholds=(0.1, 0.5, 1.0),
                             n_repeats: int = 10, n_folds: int = 5, seed: int = 0,
                             classifier_params: dict | None = None) -> LabelQualityReport:
    """Cross-validated classifiers with negatives sampled below each threshold.

    Positives are all ``diagnosed`` rows. For every threshold and repetition
    an equal number of negatives is drawn without replacement from the
    undiagnosed rows whose normalized score is at most the threshold, then
    ``n_folds``-fold stratified CV is run with fresh folds. Features are the
    presence indicators of ``selected_codes``. Each metric is averaged over
    folds, then summarized over repetitions with a normal 95% interval.
    """
    scores = _scores(undiagnosed_scores)
    if scores.shape != (undiagnosed.n_patients,):
        raise DataError("one score per undiagnosed patient required")
    if n_repeats < 1 or n_folds < 2:
        raise InvalidParameterError("need n_repeats >= 1 and n_folds >= 2")
    n_pos = diagnosed.n_patients
    if n_pos < n_folds:
        raise DataError("fewer diagnosed patients than folds")
    X_pos = _presence_features(diagnosed, selected_codes)
    X_neg_all = _presence_features(undiagnosed, selected_codes)
    params = {"random_state": seed, **(classifier_params or {})}

    rows = []
    for t in thresholds:
        eligible = np.flatnonzero(scores <= t)
        if eligible.size < n_pos:
            raise InvalidParameterError(
                f"threshold {t}: only {eligible.size} undiagnosed patients score <= {t}, "
                f"{n_pos} negatives needed"
            )
        per_rep = {k: [] for k in METRICS}
        for rep in range(n_repeats):
            # same stream for every threshold: identical pools give identical draws
            stream = np.random.SeedSequence([seed, rep])
            rng = np.random.Generator(np.random.Philox(stream))
            neg = rng.choice(eligible, size=n_pos, replace=False)
            X = np.vstack([X_pos, X_neg_all[np.sort(neg)]])
            y = np.r_[np.ones(n_pos, dtype=int), np.zeros(n_pos, dtype=int)]
            folds = StratifiedKFold(n_folds, shuffle=True, random_state=int(rng.integers(2**31)))
            fold_metrics = {k: [] for k in METRICS}
            for f_idx, (tr, te) in enumerate(folds.split(X, y)):
                clf = LogisticGD(**{**params, "random_state": int(rng.integers(2**31))})
                clf.fit(X[tr], y[tr])
                for k, v in classification_metrics(y[te], clf.predict_proba(X[te])[:, 1]).items():
                    fold_metrics[k].append(v)
            for k in METRICS:
                per_rep[k].append(float(np.mean(fold_metrics[k])))
        rows.append(LabelQualityRow(float(t), int(eligible.size),
                                    {k: MetricSummary.from_values(per_rep[k]) for k in METRICS}))
    return LabelQualityReport(tuple(rows), n_repeats, n_folds, n_pos, seed)


def write_label_quality_tsv(report: LabelQualityReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        header = ["threshold"] + [f"{k}_{s}" for k in METRICS for s in ("mean", "ci_low", "ci_high")]
        fh.write("\t".join(header) + "\n")
        for r in report.rows:
            cells = [repr(r.threshold)]
            for k in METRICS:
                ms = r.metrics[k]
                cells += [repr(ms.mean), repr(ms.ci_low), repr(ms.ci_high)]
            fh.write("\t".join(cells) + "\n")


def write_summary_tsv(summaries: Sequence[ScoreSummary], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("cohort\tcount\tmean\tmedian\tmaximum\n")
        for s in summaries:
            fh.write(f"{s.cohort_name}\t{s.count}\t{s.mean!r}\t{s.median!r}\t{s.maximum!r}\n")
