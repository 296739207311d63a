"""Synthetic diagnosed/undiagnosed cohorts with planted latent structure.

Each planted component owns a disjoint block of signature covariates.
A diagnosed patient carries one or two components and expresses each of
their signature covariates with probability ``signal_prevalence_diag``.
Undiagnosed patients follow the same recipe with
``signal_prevalence_undiag``, except for a fixed share of hidden positives
that are generated exactly like diagnosed patients. Every other covariate
is background noise present with probability ``background_rate``.

Rows are drawn from independent Philox streams keyed by (seed, cohort, row),
so generation is reproducible and row-order independent.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp

from .cohort import CohortMatrix
from .exceptions import InvalidParameterError

__all__ = ["SynthConfig", "SynthTruth", "generate", "STANDARD_CONFIG"]

_DIAG, _UNDIAG, _LAYOUT = 0, 1, 2


@dataclass(frozen=True)
class SynthConfig:
    n_diagnosed: int = 2000
    n_undiagnosed: int = 10000
    n_covariates: int = 500
    n_components: int = 4
    signature_size: int = 10
    signal_prevalence_diag: float = 0.6
    signal_prevalence_undiag: float = 0.05
    hidden_positive_rate: float = 0.1
    background_rate: float = 0.02
    count_max: int = 5
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_diagnosed, self.n_undiagnosed, self.n_covariates) < 0:
            raise InvalidParameterError("cohort sizes must be non-negative")
        if self.n_components < 1 or self.signature_size < 1:
            raise InvalidParameterError("need at least one component and one signature covariate")
        if self.n_components * self.signature_size > self.n_covariates:
            raise InvalidParameterError("signature blocks do not fit into n_covariates")
        for name in ("signal_prevalence_diag", "signal_prevalence_undiag",
                     "hidden_positive_rate", "background_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1]")
        if self.signal_prevalence_diag <= self.signal_prevalence_undiag:
            raise InvalidParameterError("signal_prevalence_diag must exceed signal_prevalence_undiag")
        if self.count_max < 1:
            raise InvalidParameterError("count_max must be >= 1")

    @classmethod
    def from_mapping(cls, values) -> SynthConfig:
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise InvalidParameterError(f"unknown synth parameter {key!r}")
            try:
                kwargs[key] = int(raw) if known[key] == "int" else float(raw)
            except ValueError:
                raise InvalidParameterError(f"synth parameter {key}={raw!r} is not a {known[key]}") from None
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


STANDARD_CONFIG = SynthConfig()


@dataclass(frozen=True, eq=False)
class SynthTruth:
    """Ground truth behind a generated cohort.

    ``signature[j]`` is the planted component of covariate ``j`` or -1 for
    background. ``diag_components`` / ``undiag_components`` hold a k-column
    boolean membership matrix per cohort.
    """

    signature: np.ndarray
    hidden_positive: np.ndarray
    diag_components: np.ndarray
    undiag_components: np.ndarray

    @property
    def signature_columns(self) -> np.ndarray:
        return np.flatnonzero(self.signature >= 0)

    @property
    def background_columns(self) -> np.ndarray:
        return np.flatnonzero(self.signature < 0)


def _row_rng(seed: int, cohort: int, row: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, cohort, row])))


def _draw_row(rng, blocks, background, p_signal, cfg):
    k = len(blocks)
    n_comp = min(int(rng.integers(1, 3)), k)
    comps = rng.choice(k, size=n_comp, replace=False)
    cols = [blocks[c][rng.random(blocks[c].size) < p_signal] for c in np.sort(comps)]
    cols.append(background[rng.random(background.size) < cfg.background_rate])
    cols = np.sort(np.concatenate(cols))
    counts = rng.integers(1, cfg.count_max + 1, size=cols.size)
    return comps, cols, counts


def _assemble(rows, n_rows, m):
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([r[0].size for r in rows])
    indices = np.concatenate([r[0] for r in rows]) if rows else np.zeros(0)
    data = np.concatenate([r[1] for r in rows]) if rows else np.zeros(0)
    return sp.csr_matrix(
        (data.astype(np.uint32), indices.astype(np.int32), indptr), shape=(n_rows, m)
    )


def generate(cfg: SynthConfig = STANDARD_CONFIG):
    """Return ``(diagnosed, undiagnosed, truth)`` for ``cfg``."""
    cfg.validate()
    m, k, s = cfg.n_covariates, cfg.n_components, cfg.signature_size
    layout = _row_rng(cfg.seed, _LAYOUT, 0)
    perm = layout.permutation(m)
    signature = np.full(m, -1, dtype=np.int64)
    blocks = []
    for c in range(k):
        block = np.sort(perm[c * s:(c + 1) * s])
        signature[block] = c
        blocks.append(block)
    background = np.flatnonzero(signature < 0)

    n_hidden = int(np.floor(cfg.hidden_positive_rate * cfg.n_undiagnosed + 0.5))
    hidden = np.zeros(cfg.n_undiagnosed, dtype=bool)
    hidden[layout.permutation(cfg.n_undiagnosed)[:n_hidden]] = True

    covariates = tuple(f"COV{j:05d}" for j in range(m))
    out = []
    memberships = []
    for cohort, n_rows, prefix in ((_DIAG, cfg.n_diagnosed, "D"), (_UNDIAG, cfg.n_undiagnosed, "U")):
        rows = []
        member = np.zeros((n_rows, k), dtype=bool)
        for i in range(n_rows):
            positive = cohort == _DIAG or hidden[i]
            p = cfg.signal_prevalence_diag if positive else cfg.signal_prevalence_undiag
            comps, cols, counts = _draw_row(_row_rng(cfg.seed, cohort, i), blocks, background, p, cfg)
            member[i, comps] = True
            rows.append((cols, counts))
        X = _assemble(rows, n_rows, m)
        ids = tuple(f"{prefix}{i:07d}" for i in range(n_rows))
        labels = np.full(n_rows, cohort == _DIAG)
        out.append(CohortMatrix(X, covariates, ids, labels))
        memberships.append(member)

    truth = SynthTruth(signature, hidden, memberships[0], memberships[1])
    return out[0], out[1], truth


def write_truth(diagnosed: CohortMatrix, undiagnosed: CohortMatrix, truth: SynthTruth, prefix) -> list:
    """Write ``<prefix>.hidden.tsv`` and ``<prefix>.signature.tsv``."""
    from pathlib import Path

    prefix = Path(prefix)
    hidden_path = prefix.with_name(prefix.name + ".hidden.tsv")
    sig_path = prefix.with_name(prefix.name + ".signature.tsv")
    with open(hidden_path, "w", encoding="utf-8", newline="") as fh:
        for pid, flag in zip(undiagnosed.patient_ids, truth.hidden_positive):
            fh.write(f"{pid}\t{int(flag)}\n")
    with open(sig_path, "w", encoding="utf-8", newline="") as fh:
        for code, comp in zip(diagnosed.covariates, truth.signature):
            fh.write(f"{code}\t{'background' if comp < 0 else int(comp)}\n")
    return [hidden_path, sig_path]
