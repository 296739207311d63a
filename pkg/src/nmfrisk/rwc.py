"""Rank-weighted coefficients (RWC) and mean-threshold feature selection.

For covariate ``j`` the RWC is the reciprocal-rank weighted average of its
NMF coefficients ``H[i, j]`` over components ``i``, where the rank is the
position of ``H[i, j]`` within row ``i`` sorted by descending value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted

from .cohort import CohortMatrix
from .exceptions import DataError, InvalidParameterError, NumericalError
from .nmf import as_float_csr, fit_nmf

__all__ = [
    "FeatureWeights",
    "component_ranks",
    "rwc_single",
    "rwc_ensemble",
    "select_features",
    "RWCSelector",
]


def component_ranks(H) -> np.ndarray:
    """1-based rank of every entry within its row, largest first.

    Equal values are ordered by ascending column index, so every row holds
    a permutation of ``1..m``.
    """
    H = np.asarray(H, dtype=np.float64)
    k, m = H.shape
    order = np.argsort(-H, axis=1, kind="stable")
    ranks = np.empty((k, m), dtype=np.int64)
    np.put_along_axis(ranks, order, np.arange(1, m + 1)[None, :], axis=1)
    return ranks


def rwc_single(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.size == 0:
        raise InvalidParameterError("H must be a non-empty 2-D matrix")
    if np.any(H < 0) or not np.all(np.isfinite(H)):
        raise DataError("H must be finite and non-negative")
    inv = 1.0 / component_ranks(H)
    return (H * inv).sum(axis=0) / inv.sum(axis=0)


@dataclass(frozen=True, eq=False)
class FeatureWeights:
    weights: np.ndarray
    n_runs: int
    seeds: tuple[int, ...]
    mean_nonzero_rwc: float
    selected: tuple[int, ...]
    covariates: tuple[str, ...] | None = None

    @property
    def threshold(self) -> float:
        return _threshold(self.weights)

    def selected_codes(self) -> tuple[str, ...]:
        if self.covariates is None:
            raise DataError("weights carry no covariate codes")
        return tuple(self.covariates[j] for j in self.selected)


def _threshold(w: np.ndarray) -> float:
    positive = w[w > 0]
    if positive.size == 0:
        raise NumericalError("NMF produced empty H: no covariate has a positive RWC")
    # mean <= max in exact arithmetic; the clamp keeps that true after rounding
    return float(min(positive.mean(), positive.max()))


def _select(w: np.ndarray) -> tuple[int, ...]:
    t = _threshold(w)
    idx = np.flatnonzero((w > 0) & (w >= t))
    order = np.lexsort((idx, -w[idx]))
    return tuple(int(j) for j in idx[order])


def select_features(fw) -> tuple[int, ...]:
    """Covariates with RWC at or above the mean positive RWC.

    Returned by descending weight, ties by ascending column index.
    Accepts a :class:`FeatureWeights` or a plain weight vector.
    """
    w = fw.weights if isinstance(fw, FeatureWeights) else np.asarray(fw, dtype=np.float64)
    return _select(w)


def rwc_ensemble(X, k: int, n_runs: int = 40, base_seed: int = 0,
                 max_iter: int = 200, tol: float = 1e-4, callback=None) -> FeatureWeights:
    """Average RWC over ``n_runs`` NMF fits seeded ``base_seed + r``.

    ``callback``, if given, receives each fitted :class:`FactorModel`.
    """
    if n_runs < 1:
        raise InvalidParameterError("n_runs must be >= 1")
    covariates = X.covariates if isinstance(X, CohortMatrix) else None
    Xf = as_float_csr(X)
    seeds = tuple(base_seed + r for r in range(n_runs))
    total = np.zeros(Xf.shape[1])
    for seed in seeds:
        model = fit_nmf(Xf, k, seed, max_iter, tol)
        if callback is not None:
            callback(model)
        total += rwc_single(model.H)
    w = total / n_runs
    positive = w[w > 0]
    mean_nz = float(positive.mean()) if positive.size else 0.0
    selected = _select(w) if positive.size else ()
    w.setflags(write=False)
    return FeatureWeights(w, n_runs, seeds, mean_nz, selected, covariates)


class RWCSelector(SelectorMixin, BaseEstimator):
    """Select covariates whose ensemble RWC reaches the mean positive RWC."""

    def __init__(self, n_components=9, *, n_runs=40, max_iter=200, tol=1e-4, random_state=0):
        self.n_components = n_components
        self.n_runs = n_runs
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        fw = rwc_ensemble(X, self.n_components, self.n_runs, self.random_state,
                          self.max_iter, self.tol)
        if not fw.selected:
            raise NumericalError("NMF produced empty H: no covariate has a positive RWC")
        self.feature_weights_ = fw
        self.rwc_ = np.array(fw.weights)
        self.threshold_ = fw.threshold
        self.selected_ = np.array(fw.selected, dtype=np.intp)
        self.n_features_in_ = self.rwc_.size
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "rwc_")
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.selected_] = True
        return mask

    def transform(self, X):
        if isinstance(X, CohortMatrix):
            X = X.X
        return super().transform(X)


# -- TSV --------------------------------------------------------------------


def write_rwc_tsv(fw: FeatureWeights, path, covariates=None) -> None:
    """``code<TAB>rwc<TAB>selected`` rows by descending RWC."""
    covariates = covariates if covariates is not None else fw.covariates
    w = fw.weights
    order = np.lexsort((np.arange(w.size), -w))
    chosen = set(fw.selected)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for j in order:
            fh.write(f"{covariates[j]}\t{float(w[j])!r}\t{int(j in chosen)}\n")


def read_rwc_tsv(path) -> list[tuple[str, float, bool]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                code, w, flag = line.rstrip("\n").split("\t")
                rows.append((code, float(w), flag == "1"))
    return rows
