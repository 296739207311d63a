"""Covariate prevalence and smoothed binary KL divergence between groups."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cohort import CohortMatrix
from .exceptions import DataError, InvalidParameterError

__all__ = ["DivergenceTable", "prevalence", "kl_divergence", "divergence_table"]

DEFAULT_EPSILON = 1e-8


def _column_positions(m: CohortMatrix, features) -> np.ndarray:
    """Column index per requested feature, -1 where the code is unknown."""
    if features is None:
        return np.arange(m.n_covariates)
    features = list(features)
    if features and isinstance(features[0], str):
        return np.array([m.covariate_dict.get(c, -1) for c in features], dtype=np.int64)
    idx = np.asarray(features, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= m.n_covariates):
        raise InvalidParameterError("feature index outside the covariate universe")
    return idx


def prevalence(m, features=None) -> np.ndarray:
    """Share of patients with a positive count, per feature.

    ``features`` may be column indices or covariate codes (codes unknown to
    ``m`` get prevalence 0). ``None`` means every column.
    """
    if not isinstance(m, CohortMatrix):
        X = sp.csr_matrix(m)
        m = CohortMatrix(X, tuple(map(str, range(X.shape[1]))), tuple(map(str, range(X.shape[0]))),
                         np.zeros(X.shape[0], dtype=bool))
    if m.n_patients == 0:
        raise DataError("prevalence of an empty cohort is undefined")
    X = m.X
    present = X.indices[X.data > 0]
    counts = np.bincount(present, minlength=m.n_covariates)
    cols = _column_positions(m, features)
    out = np.where(cols >= 0, counts[np.maximum(cols, 0)], 0) / m.n_patients
    return out.astype(np.float64)


def kl_divergence(p_d, p_u, eps: float = DEFAULT_EPSILON):
    """Binary KL divergence (nats) of prevalence ``p_d`` from ``p_u``.

    ``eps`` is added to every term, including both complements.
    Works on scalars and arrays.
    """
    if not eps > 0:
        raise InvalidParameterError("eps must be positive")
    pd = np.asarray(p_d, dtype=np.float64)
    pu = np.asarray(p_u, dtype=np.float64)
    for name, p in (("p_d", pd), ("p_u", pu)):
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InvalidParameterError(f"{name} must lie in [0, 1]")
    a, b = pd + eps, pu + eps
    ca, cb = 1.0 - pd + eps, 1.0 - pu + eps
    d = a * np.log(a / b) + ca * np.log(ca / cb)
    d = np.where(pd == pu, 0.0, d)
    return float(d) if d.ndim == 0 else d


@dataclass(frozen=True, eq=False)
class DivergenceTable:
    covariates: tuple[str, ...]
    p_diagnosed: np.ndarray
    p_undiagnosed: np.ndarray
    epsilon: float
    kl: np.ndarray

    def __len__(self):
        return len(self.covariates)


def divergence_table(diagnosed: CohortMatrix, undiagnosed: CohortMatrix, features,
                     eps: float = DEFAULT_EPSILON) -> DivergenceTable:
    """Prevalences and KL divergence over ``features`` (codes or indices of ``diagnosed``)."""
    features = list(features)
    if features and not isinstance(features[0], str):
        features = [diagnosed.covariates[j] for j in features]
    pd = prevalence(diagnosed, features)
    pu = prevalence(undiagnosed, features)
    kl = np.atleast_1d(kl_divergence(pd, pu, eps))
    return DivergenceTable(tuple(features), pd, pu, eps, kl)


def write_divergence_tsv(table: DivergenceTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c, a, b, d in zip(table.covariates, table.p_diagnosed, table.p_undiagnosed, table.kl):
            fh.write(f"{c}\t{float(a)!r}\t{float(b)!r}\t{float(d)!r}\n")


def read_divergence_tsv(path, eps: float = DEFAULT_EPSILON) -> DivergenceTable:
    codes, pd, pu, kl = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                c, a, b, d = line.rstrip("\n").split("\t")
                codes.append(c)
                pd.append(float(a))
                pu.append(float(b))
                kl.append(float(d))
    return DivergenceTable(tuple(codes), np.array(pd), np.array(pu), eps, np.array(kl))
