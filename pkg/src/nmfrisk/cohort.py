"""Sparse patient x covariate count matrices.

A :class:`CohortMatrix` couples a CSR matrix of encounter counts with the
covariate dictionary, patient identifiers and diagnosed/undiagnosed labels.
Everything downstream (factorization, prevalence, scoring) consumes it.
"""
from __future__ import annotations

import csv
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .exceptions import DataError, InvalidParameterError

__all__ = [
    "CohortMatrix",
    "CohortSplit",
    "ingest_events",
    "filter_min_support",
    "split_train_validation",
    "read_events_tsv",
    "read_labels_tsv",
    "save_cohort",
    "load_cohort",
    "write_csr",
    "read_csr",
]

CSR_MAGIC = b"NMFRCSR\x00"
CSR_VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")
_COUNT_MAX = np.iinfo(np.uint32).max


@dataclass(frozen=True, eq=False)
class CohortMatrix:
    """Immutable CSR count matrix with covariate and patient metadata.

    ``labels`` is a boolean vector, True for diagnosed patients.
    """

    X: sp.csr_matrix
    covariates: tuple[str, ...]
    patient_ids: tuple[str, ...]
    labels: np.ndarray
    covariate_dict: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        X = self.X
        if not sp.isspmatrix_csr(X):
            raise DataError("X must be a scipy CSR matrix")
        n, m = X.shape
        if len(self.patient_ids) != n:
            raise DataError(f"{len(self.patient_ids)} patient ids for {n} rows")
        if len(self.covariates) != m:
            raise DataError(f"{len(self.covariates)} covariate codes for {m} columns")
        labels = np.asarray(self.labels, dtype=bool)
        if labels.shape != (n,):
            raise DataError("labels must have one entry per patient")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        cdict = {c: j for j, c in enumerate(self.covariates)}
        if len(cdict) != m:
            raise DataError("covariate codes must be unique")
        object.__setattr__(self, "covariate_dict", cdict)
        for arr in (X.data, X.indices, X.indptr):
            arr.setflags(write=False)

    @property
    def n_patients(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.X.nnz)

    @property
    def row_offsets(self) -> np.ndarray:
        return self.X.indptr

    @property
    def column_indices(self) -> np.ndarray:
        return self.X.indices

    @property
    def values(self) -> np.ndarray:
        return self.X.data

    @property
    def row_nnz(self) -> np.ndarray:
        return np.diff(self.X.indptr)

    def take_rows(self, rows) -> CohortMatrix:
        """Row subset in the given order; the covariate dictionary is kept."""
        rows = np.asarray(rows, dtype=np.intp)
        X = self.X[rows]
        X.sort_indices()
        return CohortMatrix(
            X=X,
            covariates=self.covariates,
            patient_ids=tuple(self.patient_ids[i] for i in rows),
            labels=self.labels[rows],
        )

    def diagnosed(self) -> CohortMatrix:
        return self.take_rows(np.flatnonzero(self.labels))

    def undiagnosed(self) -> CohortMatrix:
        return self.take_rows(np.flatnonzero(~self.labels))

    def with_covariates(self, covariates: tuple[str, ...]) -> CohortMatrix:
        """Re-express the matrix over another covariate ordering.

        Codes missing from ``self`` become empty columns; codes of ``self``
        absent from ``covariates`` must have no stored entries.
        """
        covariates = tuple(covariates)
        if covariates == self.covariates:
            return self
        target = {c: j for j, c in enumerate(covariates)}
        mapping = np.full(self.n_covariates, -1, dtype=np.int64)
        for c, j in self.covariate_dict.items():
            mapping[j] = target.get(c, -1)
        coo = self.X.tocoo()
        new_cols = mapping[coo.col]
        if np.any(new_cols < 0):
            lost = self.covariates[int(coo.col[np.argmax(new_cols < 0)])]
            raise DataError(f"covariate {lost!r} has data but is absent from the target dictionary")
        X = sp.csr_matrix(
            (coo.data, (coo.row, new_cols)), shape=(self.n_patients, len(covariates))
        )
        X.sort_indices()
        return CohortMatrix(X, covariates, self.patient_ids, self.labels)

    def presence(self) -> sp.csr_matrix:
        """0/1 float matrix with the same sparsity pattern."""
        P = self.X.astype(np.float64)
        P.data[:] = 1.0
        return P


@dataclass(frozen=True)
class CohortSplit:
    training: CohortMatrix
    validation: CohortMatrix
    seed: int


def _build(rows, cols, counts, n, m) -> sp.csr_matrix:
    X = sp.coo_matrix(
        (np.asarray(counts, dtype=np.int64), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
        shape=(n, m),
    ).tocsr()
    X.sum_duplicates()
    X.eliminate_zeros()
    X.sort_indices()
    if X.nnz and X.data.max() > _COUNT_MAX:
        raise DataError("encounter count overflows uint32")
    return sp.csr_matrix(
        (X.data.astype(np.uint32), X.indices.astype(np.int32), X.indptr.astype(np.int64)),
        shape=(n, m),
    )


def ingest_events(
    event_records: Iterable[tuple[str, str, int]],
    labels: Mapping[str, bool | int],
) -> CohortMatrix:
    """Assemble a cohort from ``(patient_id, covariate_code, count)`` records.

    Rows follow the order of ``labels``; patients without any event stay in
    the matrix as empty rows. Columns follow first-seen order of codes.
    Duplicate pairs are summed and zero counts dropped.
    """
    patient_ids = tuple(labels)
    row_of = {p: i for i, p in enumerate(patient_ids)}
    col_of: dict[str, int] = {}
    rows: list[int] = []
    cols: list[int] = []
    counts: list[int] = []
    for pid, code, count in event_records:
        if pid not in row_of:
            raise DataError(f"patient {pid!r} has events but no label")
        count = int(count)
        if count < 0:
            raise DataError(f"negative count {count} for patient {pid!r}, covariate {code!r}")
        j = col_of.setdefault(code, len(col_of))
        rows.append(row_of[pid])
        cols.append(j)
        counts.append(count)
    X = _build(rows, cols, counts, len(patient_ids), len(col_of))
    flags = np.array([bool(int(labels[p])) for p in patient_ids], dtype=bool)
    return CohortMatrix(X, tuple(col_of), patient_ids, flags)


def filter_min_support(m: CohortMatrix, min_nnz: int) -> CohortMatrix:
    """Keep rows with at least ``min_nnz`` distinct covariates."""
    if min_nnz < 0:
        raise InvalidParameterError("min_nnz must be non-negative")
    keep = np.flatnonzero(m.row_nnz >= min_nnz)
    if keep.size == m.n_patients:
        return m
    return m.take_rows(keep)


def split_train_validation(m: CohortMatrix, n_validation: int, seed: int) -> CohortSplit:
    """Draw ``n_validation`` rows uniformly without replacement.

    Both parts keep the original relative row order.
    """
    if not 0 <= n_validation <= m.n_patients:
        raise InvalidParameterError(
            f"n_validation={n_validation} outside [0, {m.n_patients}]"
        )
    rng = np.random.Generator(np.random.Philox(seed))
    chosen = np.zeros(m.n_patients, dtype=bool)
    chosen[rng.choice(m.n_patients, size=n_validation, replace=False)] = True
    return CohortSplit(
        training=m.take_rows(np.flatnonzero(~chosen)),
        validation=m.take_rows(np.flatnonzero(chosen)),
        seed=seed,
    )


# -- text formats -----------------------------------------------------------


def read_events_tsv(path) -> list[tuple[str, str, int]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                count = int(row[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: count {row[2]!r} is not an integer") from None
            out.append((row[0], row[1], count))
    return out


def read_labels_tsv(path) -> dict[str, bool]:
    labels: dict[str, bool] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 2 or row[1] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: expected 'patient_id<TAB>0|1'")
            if row[0] in labels:
                raise DataError(f"{path}:{lineno}: duplicate patient {row[0]!r}")
            labels[row[0]] = row[1] == "1"
    return labels


def write_events_tsv(m: CohortMatrix, path) -> None:
    X = m.X
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for i, pid in enumerate(m.patient_ids):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            for j, v in zip(X.indices[lo:hi], X.data[lo:hi]):
                fh.write(f"{pid}\t{m.covariates[j]}\t{int(v)}\n")


def write_labels_tsv(m: CohortMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for pid, flag in zip(m.patient_ids, m.labels):
            fh.write(f"{pid}\t{int(flag)}\n")


# -- binary container -------------------------------------------------------


def write_csr(X: sp.csr_matrix, path) -> None:
    """Little-endian container: header, row offsets, column indices, counts."""
    n, m = X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CSR_MAGIC, CSR_VERSION, n, m, X.nnz))
        fh.write(np.asarray(X.indptr, dtype="<u8").tobytes())
        fh.write(np.asarray(X.indices, dtype="<u4").tobytes())
        fh.write(np.asarray(X.data, dtype="<u4").tobytes())


def read_csr(path) -> sp.csr_matrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, m, nnz = _HEADER.unpack_from(raw)
    if magic != CSR_MAGIC:
        raise DataError(f"{path}: not a CSR container")
    if version != CSR_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * (n + 1) + 8 * nnz
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} != expected {expected}")
    off = _HEADER.size
    indptr = np.frombuffer(raw, dtype="<u8", count=n + 1, offset=off)
    off += 8 * (n + 1)
    indices = np.frombuffer(raw, dtype="<u4", count=nnz, offset=off)
    off += 4 * nnz
    data = np.frombuffer(raw, dtype="<u4", count=nnz, offset=off)
    if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr.astype(np.int64)) < 0):
        raise DataError(f"{path}: corrupt row offsets")
    if nnz and (indices.max() >= m or np.any(data == 0)):
        raise DataError(f"{path}: corrupt column indices or zero values")
    X = sp.csr_matrix(
        (data.astype(np.uint32), indices.astype(np.int32), indptr.astype(np.int64)),
        shape=(n, m),
    )
    if not X.has_sorted_indices:
        raise DataError(f"{path}: column indices not increasing within rows")
    return X


def write_covariate_dict(covariates, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for j, c in enumerate(covariates):
            fh.write(f"{c}\t{j}\n")


def read_covariate_dict(path) -> tuple[str, ...]:
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row:
                pairs.append((int(row[1]), row[0]))
    pairs.sort()
    if [j for j, _ in pairs] != list(range(len(pairs))):
        raise DataError(f"{path}: column indices are not a bijection onto [0, m)")
    return tuple(c for _, c in pairs)


def save_cohort(m: CohortMatrix, prefix) -> list[Path]:
    """Write ``<prefix>.csr``, ``<prefix>.covariates.tsv`` and ``<prefix>.patients.tsv``."""
    prefix = Path(prefix)
    paths = [prefix.with_name(prefix.name + s) for s in (".csr", ".covariates.tsv", ".patients.tsv")]
    write_csr(m.X, paths[0])
    write_covariate_dict(m.covariates, paths[1])
    write_labels_tsv(m, paths[2])
    return paths


def load_cohort(prefix) -> CohortMatrix:
    prefix = Path(prefix)
    X = read_csr(prefix.with_name(prefix.name + ".csr"))
    covariates = read_covariate_dict(prefix.with_name(prefix.name + ".covariates.tsv"))
    labels = read_labels_tsv(prefix.with_name(prefix.name + ".patients.tsv"))
    return CohortMatrix(X, covariates, tuple(labels), np.fromiter(labels.values(), dtype=bool, count=len(labels)))
