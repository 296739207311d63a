"""Patient risk scores, percentile ranks and risk categories.

The raw score of a patient sums ``rwc * kl`` over the selected covariates
present in the patient's record; counts beyond presence carry no weight.
Raw scores map to ``[0, 1)`` through ``2/pi * atan`` and are ranked against
the normalized scores of the diagnosed training cohort.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cohort import CohortMatrix, filter_min_support
from .divergence import DEFAULT_EPSILON, DivergenceTable, divergence_table
from .exceptions import DataError, InvalidParameterError
from .rwc import FeatureWeights, rwc_ensemble

__all__ = [
    "LOW",
    "MODERATE",
    "HIGH",
    "RiskProfile",
    "ReferenceDistribution",
    "feature_coefficients",
    "raw_score",
    "raw_scores",
    "normalize_score",
    "percentile_rank",
    "categorize",
    "score_cohort",
    "RiskStratifier",
]

LOW, MODERATE, HIGH = "Low", "Moderate", "High"
DEFAULT_BOUNDS = (50.0, 90.0)


@dataclass(frozen=True)
class RiskProfile:
    patient_id: str
    raw_score: float
    normalized_score: float
    percentile: float
    category: str


class ReferenceDistribution:
    """Sorted normalized scores that percentiles are measured against."""

    def __init__(self, scores):
        s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
        if s.size == 0:
            raise DataError("reference distribution is empty")
        s.setflags(write=False)
        self.scores = s

    @property
    def count(self) -> int:
        return self.scores.size

    def __len__(self):
        return self.scores.size


def feature_coefficients(weights: FeatureWeights | Sequence, divs: DivergenceTable) -> np.ndarray:
    """Per-covariate ``w_j * d_j`` in the order of ``divs.covariates``.

    ``weights`` is either a :class:`FeatureWeights` carrying covariate codes or
    a sequence of selected weights already aligned with ``divs``.
    """
    if isinstance(weights, FeatureWeights):
        codes = weights.selected_codes()
        if set(codes) != set(divs.covariates) or len(codes) != len(divs.covariates):
            raise DataError("selected covariates of weights and divergences differ")
        by_code = {weights.covariates[j]: weights.weights[j] for j in weights.selected}
        w = np.array([by_code[c] for c in divs.covariates], dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(divs.covariates),):
            raise DataError(f"{w.size} weights for {len(divs.covariates)} divergences")
    return w * np.asarray(divs.kl, dtype=np.float64)


def presence_matrix(m: CohortMatrix, codes: Sequence[str]) -> sp.csr_matrix:
    """0/1 matrix of ``m`` restricted to ``codes``, columns in ``codes`` order."""
    cols = np.array([m.covariate_dict.get(c, -1) for c in codes], dtype=np.int64)
    known = np.flatnonzero(cols >= 0)
    select = sp.csr_matrix(
        (np.ones(known.size), (cols[known], known)), shape=(m.n_covariates, len(codes))
    )
    return (m.X > 0).astype(np.float64) @ select


def raw_scores(m: CohortMatrix, codes: Sequence[str], coefficients) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (len(codes),):
        raise DataError("one coefficient per selected covariate required")
    if m.n_patients == 0:
        return np.zeros(0)
    return np.asarray(presence_matrix(m, codes) @ coefficients).ravel()


def raw_score(patient_row, weights, divs: DivergenceTable) -> float:
    """Raw score of one patient.

    ``patient_row`` maps covariate code to count; a one-row
    :class:`CohortMatrix` is accepted too.
    """
    coef = feature_coefficients(weights, divs)
    if isinstance(patient_row, CohortMatrix):
        if patient_row.n_patients != 1:
            raise InvalidParameterError("raw_score expects a single patient")
        return float(raw_scores(patient_row, divs.covariates, coef)[0])
    return float(sum(c for code, c in zip(divs.covariates, coef) if patient_row.get(code, 0) > 0))


def normalize_score(r):
    """Map raw scores in ``[0, inf)`` onto ``[0, 1)`` by ``2/pi * atan``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise InvalidParameterError("raw scores must be non-negative")
    out = np.arctan(r) / (np.pi / 2)
    return float(out) if out.ndim == 0 else out


def percentile_rank(score, ref: ReferenceDistribution):
    """Mid-rank percentile of ``score`` within ``ref`` (scalar or array)."""
    if not isinstance(ref, ReferenceDistribution):
        ref = ReferenceDistribution(ref)
    s = np.asarray(score, dtype=np.float64)
    below = np.searchsorted(ref.scores, s, side="left")
    upto = np.searchsorted(ref.scores, s, side="right")
    out = 100.0 * (below + 0.5 * (upto - below)) / ref.count
    return float(out) if out.ndim == 0 else out


def categorize(percentile, bounds=DEFAULT_BOUNDS):
    """Low below ``bounds[0]``, High above ``bounds[1]``, Moderate in between (inclusive)."""
    lo, hi = bounds
    p = np.asarray(percentile, dtype=np.float64)
    out = np.where(p < lo, LOW, np.where(p > hi, HIGH, MODERATE))
    return str(out) if out.ndim == 0 else out


def score_cohort(m: CohortMatrix, weights, divs: DivergenceTable, ref: ReferenceDistribution,
                 bounds=DEFAULT_BOUNDS) -> list[RiskProfile]:
    coef = feature_coefficients(weights, divs)
    return _profiles(m, raw_scores(m, divs.covariates, coef), ref, bounds)


def _profiles(m, raw, ref, bounds):
    norm = normalize_score(raw) if raw.size else np.zeros(0)
    pct = percentile_rank(norm, ref) if raw.size else np.zeros(0)
    cats = categorize(pct, bounds) if raw.size else np.zeros(0, dtype=str)
    return [
        RiskProfile(pid, float(r), float(n), float(p), str(c))
        for pid, r, n, p, c in zip(m.patient_ids, raw, norm, pct, cats)
    ]


class RiskStratifier(BaseEstimator):
    """Positive-only risk stratification.

    ``fit(X, y)`` takes the pooled cohort with ``y == 1`` for diagnosed
    patients (``y`` defaults to ``X.labels``). The NMF ensemble runs on the
    diagnosed rows having at least ``min_nnz`` covariates; those rows also
    form the reference distribution. Diagnosed prevalence uses every
    diagnosed row unless ``prevalence_cohort="filtered"``.
    """

    def __init__(self, n_components=9, *, n_runs=40, max_iter=200, tol=1e-4,
                 epsilon=DEFAULT_EPSILON, min_nnz=5, prevalence_cohort="all",
                 percentile_bounds=DEFAULT_BOUNDS, random_state=0):
        self.n_components = n_components
        self.n_runs = n_runs
        self.max_iter = max_iter
        self.tol = tol
        self.epsilon = epsilon
        self.min_nnz = min_nnz
        self.prevalence_cohort = prevalence_cohort
        self.percentile_bounds = percentile_bounds
        self.random_state = random_state

    def fit(self, X: CohortMatrix, y=None):
        if not isinstance(X, CohortMatrix):
            raise DataError("RiskStratifier needs a CohortMatrix (covariate codes are required)")
        if self.prevalence_cohort not in ("all", "filtered"):
            raise InvalidParameterError("prevalence_cohort must be 'all' or 'filtered'")
        y = X.labels if y is None else np.asarray(y).astype(bool)
        if y.shape != (X.n_patients,):
            raise DataError("y must have one label per patient")
        diagnosed = X.take_rows(np.flatnonzero(y))
        undiagnosed = X.take_rows(np.flatnonzero(~y))
        training = filter_min_support(diagnosed, self.min_nnz)
        fw = rwc_ensemble(training, self.n_components, self.n_runs, self.random_state,
                          self.max_iter, self.tol)
        prev_source = diagnosed if self.prevalence_cohort == "all" else training
        divs = divergence_table(prev_source, undiagnosed, fw.selected_codes(), self.epsilon)
        self._set_model(fw, divs, None)
        self.reference_ = ReferenceDistribution(self.score_samples(training))
        return self

    @classmethod
    def from_components(cls, weights, divs: DivergenceTable, reference, **params):
        """Build a fitted scorer from precomputed weights, divergences and reference scores."""
        est = cls(**params)
        est._set_model(weights, divs, reference)
        return est

    def _set_model(self, weights, divs, reference):
        self.feature_weights_ = weights if isinstance(weights, FeatureWeights) else None
        self.divergence_ = divs
        self.selected_codes_ = divs.covariates
        self.coef_ = feature_coefficients(weights, divs)
        if reference is not None:
            self.reference_ = reference if isinstance(reference, ReferenceDistribution) \
                else ReferenceDistribution(reference)

    def decision_function(self, X: CohortMatrix) -> np.ndarray:
        """Raw (unbounded) risk scores."""
        check_is_fitted(self, "coef_")
        return raw_scores(X, self.selected_codes_, self.coef_)

    def score_samples(self, X: CohortMatrix) -> np.ndarray:
        """Normalized risk scores in ``[0, 1)``."""
        raw = self.decision_function(X)
        return normalize_score(raw) if raw.size else raw

    def transform(self, X: CohortMatrix) -> np.ndarray:
        return self.score_samples(X)[:, None]

    def percentile(self, X: CohortMatrix) -> np.ndarray:
        check_is_fitted(self, "reference_")
        s = self.score_samples(X)
        return percentile_rank(s, self.reference_) if s.size else s

    def predict(self, X: CohortMatrix) -> np.ndarray:
        """Risk category per patient."""
        p = self.percentile(X)
        return categorize(p, self.percentile_bounds) if p.size else np.zeros(0, dtype=str)

    def profile(self, X: CohortMatrix) -> list[RiskProfile]:
        check_is_fitted(self, "reference_")
        return _profiles(X, self.decision_function(X), self.reference_, self.percentile_bounds)


def write_profiles_tsv(profiles: Sequence[RiskProfile], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for p in profiles:
            fh.write(f"{p.patient_id}\t{p.raw_score!r}\t{p.normalized_score!r}\t{p.percentile!r}\t{p.category}\n")


def read_profiles_tsv(path) -> list[RiskProfile]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pid, r, n, p, c = line.rstrip("\n").split("\t")
                out.append(RiskProfile(pid, float(r), float(n), float(p), c))
    return out
