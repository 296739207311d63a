"""Frobenius-norm NMF with multiplicative updates on sparse input.

``X`` is never densified: every product with ``X`` goes through the CSR
structure and ``WH`` is never materialized.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cohort import CohortMatrix
from .exceptions import DataError, InvalidParameterError

__all__ = [
    "FactorModel",
    "ErrorCurve",
    "ElbowResult",
    "fit_nmf",
    "reconstruction_error",
    "sweep_k",
    "find_elbow",
    "elbow",
    "SparseNMF",
]

DENOM_FLOOR = 1e-12
CHECK_EVERY = 10

FACTOR_MAGIC = b"NMFRFAC\x00"
FACTOR_VERSION = 1
_FACTOR_HEADER = struct.Struct("<8sIQQQq")


def as_float_csr(X) -> sp.csr_matrix:
    """Coerce a cohort, sparse or dense array to a float64 CSR matrix."""
    if isinstance(X, CohortMatrix):
        X = X.X
    if sp.issparse(X):
        X = sp.csr_matrix(X, dtype=np.float64)
    else:
        X = sp.csr_matrix(np.asarray(X, dtype=np.float64))
    X.sort_indices()
    if X.nnz and X.data.min() < 0:
        raise DataError("NMF input must be non-negative")
    if X.nnz and not np.all(np.isfinite(X.data)):
        raise DataError("NMF input contains non-finite values")
    return X


@dataclass(frozen=True, eq=False)
class FactorModel:
    W: np.ndarray
    H: np.ndarray
    k: int
    seed: int
    n_iterations: int
    final_error: float
    errors: np.ndarray = field(repr=False)
    converged: bool = False


def _init_factors(X: sp.csr_matrix, k: int, seed: int):
    n, m = X.shape
    scale = np.sqrt(X.sum() / (n * m) / k)
    rng = np.random.Generator(np.random.Philox(seed))
    # 1 - U[0,1) is uniform on (0, 1]
    W = (1.0 - rng.random((n, k))) * scale
    H = (1.0 - rng.random((k, m))) * scale
    return W, H


def _squared_error(X: sp.csr_matrix, sq_norm_x: float, W: np.ndarray, H: np.ndarray) -> float:
    # Residual over stored entries is summed exactly; the remaining zero
    # positions contribute ||WH||^2 - sum over stored (WH)_ij^2.
    del sq_norm_x
    n, m = X.shape
    rows = np.repeat(np.arange(n), np.diff(X.indptr))
    wh_stored = np.einsum("ij,ij->i", W[rows], H[:, X.indices].T)
    resid = float(np.sum((X.data - wh_stored) ** 2))
    if X.nnz == n * m:
        return resid
    norm_wh = float(np.sum((W.T @ W) * (H @ H.T)))
    return resid + max(norm_wh - float(wh_stored @ wh_stored), 0.0)


def reconstruction_error(X, W, H=None) -> float:
    """Frobenius norm of ``X - WH``.

    ``W`` may also be a :class:`FactorModel`, in which case ``H`` is taken
    from it.
    """
    if isinstance(W, FactorModel):
        W, H = W.W, W.H
    X = as_float_csr(X)
    W = np.asarray(W, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if W.ndim != 2 or H.ndim != 2 or W.shape[0] != X.shape[0] or H.shape[1] != X.shape[1] or W.shape[1] != H.shape[0]:
        raise InvalidParameterError(
            f"dimension mismatch: X {X.shape}, W {W.shape}, H {H.shape}"
        )
    sq = _squared_error(X, float(X.data @ X.data), W, H)
    return float(np.sqrt(max(sq, 0.0)))


def _check_rank(X: sp.csr_matrix, k: int) -> None:
    n, m = X.shape
    if not 1 <= k <= min(n, m):
        raise InvalidParameterError(f"k={k} outside [1, min(n, m)={min(n, m)}]")


def fit_nmf(X, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-4) -> FactorModel:
    """Factorize ``X ~ WH`` by Lee-Seung multiplicative updates.

    Each iteration updates ``W`` then ``H`` and records the Frobenius error.
    Every ``CHECK_EVERY`` iterations the relative decrease since the last
    check is compared to ``tol``; ``tol=0`` runs all ``max_iter`` iterations.
    """
    X = as_float_csr(X)
    _check_rank(X, k)
    if max_iter < 0 or tol < 0:
        raise InvalidParameterError("max_iter and tol must be non-negative")
    n, m = X.shape
    sq_norm_x = float(X.data @ X.data)
    if sq_norm_x == 0.0:
        return FactorModel(np.zeros((n, k)), np.zeros((k, m)), k, seed, 0, 0.0, np.zeros(0), True)

    W, H = _init_factors(X, k, seed)
    Xt = X.T.tocsr()
    errors = np.empty(max_iter)
    last_check = np.sqrt(max(_squared_error(X, sq_norm_x, W, H), 0.0))
    converged = False
    it = 0
    while it < max_iter:
        W *= (X @ H.T) / np.maximum(W @ (H @ H.T), DENOM_FLOOR)
        H *= (Xt @ W).T / np.maximum((W.T @ W) @ H, DENOM_FLOOR)
        errors[it] = np.sqrt(max(_squared_error(X, sq_norm_x, W, H), 0.0))
        it += 1
        if tol > 0 and it % CHECK_EVERY == 0:
            err = errors[it - 1]
            if last_check == 0.0 or (last_check - err) / last_check < tol:
                converged = True
                break
            last_check = err
    errors = errors[:it].copy()
    final = reconstruction_error(X, W, H)
    for a in (W, H, errors):
        a.setflags(write=False)
    return FactorModel(W, H, k, seed, it, final, errors, converged)


@dataclass(frozen=True)
class ErrorCurve:
    ks: tuple[int, ...]
    errors: tuple[float, ...]
    seed: int
    n_seeds: int = 1

    def __post_init__(self):
        if len(self.ks) != len(self.errors):
            raise DataError("ks and errors differ in length")
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])):
            raise DataError("k values must be strictly increasing")

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.ks, self.errors))


def sweep_k(X, k_min: int, k_max: int, seed: int = 0, max_iter: int = 200,
            tol: float = 1e-4, n_seeds: int = 1) -> ErrorCurve:
    """Final reconstruction error for every ``k`` in ``[k_min, k_max]``.

    With ``n_seeds > 1`` each entry is the mean over seeds
    ``seed .. seed + n_seeds - 1``.
    """
    X = as_float_csr(X)
    if not 1 <= k_min <= k_max <= min(X.shape):
        raise InvalidParameterError(
            f"need 1 <= k_min <= k_max <= {min(X.shape)}, got [{k_min}, {k_max}]"
        )
    if n_seeds < 1:
        raise InvalidParameterError("n_seeds must be >= 1")
    ks = tuple(range(k_min, k_max + 1))
    errs = []
    for k in ks:
        runs = [fit_nmf(X, k, seed + s, max_iter, tol).final_error for s in range(n_seeds)]
        errs.append(float(np.mean(runs)))
    return ErrorCurve(ks, tuple(errs), seed, n_seeds)


@dataclass(frozen=True)
class ElbowResult:
    k: int
    second_differences: tuple[float, ...]
    distinct: bool


def find_elbow(curve: ErrorCurve) -> ElbowResult:
    """Interior ``k`` with the largest discrete second difference of error.

    Ties go to the smallest ``k``. ``distinct`` is False when the curve has
    no positive curvature anywhere.
    """
    ks, e = np.asarray(curve.ks), np.asarray(curve.errors, dtype=np.float64)
    if ks.size < 3:
        raise InvalidParameterError("elbow needs at least 3 curve entries")
    if np.any(np.diff(ks) != 1):
        raise InvalidParameterError("elbow needs consecutive k values")
    d2 = e[:-2] - 2.0 * e[1:-1] + e[2:]
    best = int(np.argmax(d2))
    slack = 1e-12 * max(float(np.max(np.abs(e))), 1.0)
    return ElbowResult(int(ks[best + 1]), tuple(float(v) for v in d2), bool(d2[best] > slack))


def elbow(curve: ErrorCurve) -> int:
    return find_elbow(curve).k


class SparseNMF(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_nmf`.

    ``fit_transform`` returns ``W``; ``components_`` holds ``H``.
    ``transform`` solves for ``W`` with ``H`` held fixed.
    """

    def __init__(self, n_components=9, *, max_iter=200, tol=1e-4, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def fit_transform(self, X, y=None):
        model = fit_nmf(X, self.n_components, self.random_state, self.max_iter, self.tol)
        self.model_ = model
        self.components_ = model.H
        self.reconstruction_err_ = model.final_error
        self.n_iter_ = model.n_iterations
        self.n_features_in_ = model.H.shape[1]
        return np.array(model.W)

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = as_float_csr(X)
        if X.shape[1] != self.n_features_in_:
            raise InvalidParameterError(
                f"X has {X.shape[1]} features, model was fit on {self.n_features_in_}"
            )
        H = self.components_
        n = X.shape[0]
        scale = np.sqrt(X.sum() / max(X.shape[0] * X.shape[1], 1) / self.n_components)
        rng = np.random.Generator(np.random.Philox(self.random_state))
        W = (1.0 - rng.random((n, self.n_components))) * scale
        HHt = H @ H.T
        XHt = X @ H.T
        for _ in range(self.max_iter):
            W *= XHt / np.maximum(W @ HHt, DENOM_FLOOR)
        return W

    def inverse_transform(self, W):
        check_is_fitted(self, "components_")
        return np.asarray(W) @ self.components_


# -- serialization ----------------------------------------------------------


def write_factor_model(model: FactorModel, path) -> None:
    """Little-endian container: header (n, m, k, seed) then row-major W and H."""
    n, k = model.W.shape
    m = model.H.shape[1]
    with open(path, "wb") as fh:
        fh.write(_FACTOR_HEADER.pack(FACTOR_MAGIC, FACTOR_VERSION, n, m, k, model.seed))
        fh.write(np.ascontiguousarray(model.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.H, dtype="<f8").tobytes())


def read_factor_model(path, X=None) -> FactorModel:
    """Load factors; ``final_error`` is recomputed when ``X`` is given, else NaN."""
    raw = Path(path).read_bytes()
    magic, version, n, m, k, seed = _FACTOR_HEADER.unpack_from(raw)
    if magic != FACTOR_MAGIC or version != FACTOR_VERSION:
        raise DataError(f"{path}: not a factor container")
    off = _FACTOR_HEADER.size
    if len(raw) != off + 8 * (n * k + k * m):
        raise DataError(f"{path}: size mismatch")
    W = np.frombuffer(raw, "<f8", n * k, off).reshape(n, k).astype(np.float64)
    H = np.frombuffer(raw, "<f8", k * m, off + 8 * n * k).reshape(k, m).astype(np.float64)
    err = reconstruction_error(X, W, H) if X is not None else float("nan")
    return FactorModel(W, H, k, seed, 0, err, np.zeros(0))


def write_error_curve(curve: ErrorCurve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for k, e in curve.entries:
            fh.write(f"{k}\t{e!r}\n")


def read_error_curve(path, seed: int = 0) -> ErrorCurve:
    ks, errs = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                k, e = line.rstrip("\n").split("\t")
                ks.append(int(k))
                errs.append(float(e))
    return ErrorCurve(tuple(ks), tuple(errs), seed)
