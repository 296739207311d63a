"""File-to-file pipeline stages.

Every stage reads its inputs from disk and writes its outputs to disk, so
the monolithic pipeline and a chain of standalone subcommands produce the
same bytes. Floats are written with ``repr`` and round-trip exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import cohort as cs
from .divergence import (
    DEFAULT_EPSILON,
    DivergenceTable,
    kl_divergence,
    prevalence,
    read_divergence_tsv,
)
from .exceptions import DataError, InvalidParameterError
from .nmf import find_elbow, sweep_k, write_error_curve, write_factor_model
from .rwc import read_rwc_tsv, rwc_ensemble, select_features, write_rwc_tsv
from .scoring import (
    DEFAULT_BOUNDS,
    ReferenceDistribution,
    normalize_score,
    raw_scores,
    read_profiles_tsv,
    score_cohort,
    write_profiles_tsv,
)
from .synth import SynthConfig, generate, write_truth
from .validation import (
    METRICS,
    jaccard_topk,
    label_quality_experiment,
    score_summary,
    write_label_quality_tsv,
    write_similarity_tsv,
    write_summary_tsv,
)

LABELS = {"diagnosed": True, "undiagnosed": False}


def cohort_paths(prefix) -> list[Path]:
    prefix = Path(prefix)
    return [prefix.with_name(prefix.name + s) for s in (".csr", ".covariates.tsv", ".patients.tsv")]


def synth(out_dir, cfg: SynthConfig) -> list[Path]:
    """Generate a cohort; writes ``cohort.*``, ``events.tsv``, ``labels.tsv`` and truth files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    diag, undiag, truth = generate(cfg)
    X = sp.vstack([diag.X, undiag.X], format="csr")
    pooled = cs.CohortMatrix(
        sp.csr_matrix((X.data.astype(np.uint32), X.indices, X.indptr), shape=X.shape),
        diag.covariates,
        diag.patient_ids + undiag.patient_ids,
        np.r_[diag.labels, undiag.labels],
    )
    paths = cs.save_cohort(pooled, out_dir / "cohort")
    cs.write_events_tsv(pooled, out_dir / "events.tsv")
    cs.write_labels_tsv(pooled, out_dir / "labels.tsv")
    paths += [out_dir / "events.tsv", out_dir / "labels.tsv"]
    paths += write_truth(diag, undiag, truth, out_dir / "truth")
    return paths


def ingest(events, labels, out_prefix) -> list[Path]:
    m = cs.ingest_events(cs.read_events_tsv(events), cs.read_labels_tsv(labels))
    return cs.save_cohort(m, out_prefix)


def filter_rows(input_prefix, out_prefix, min_nnz: int = 0, label: str | None = None) -> list[Path]:
    """Optionally keep one label group, then apply the minimum-support filter."""
    m = cs.load_cohort(input_prefix)
    if label is not None:
        if label not in LABELS:
            raise InvalidParameterError(f"label must be one of {sorted(LABELS)}")
        m = m.take_rows(np.flatnonzero(m.labels == LABELS[label]))
    return cs.save_cohort(cs.filter_min_support(m, min_nnz), out_prefix)


def split(input_prefix, n_validation: int, seed: int, out_train, out_validation) -> list[Path]:
    parts = cs.split_train_validation(cs.load_cohort(input_prefix), n_validation, seed)
    return cs.save_cohort(parts.training, out_train) + cs.save_cohort(parts.validation, out_validation)


def nmf_sweep(input_prefix, k_min: int, k_max: int, seed: int, out_tsv, max_iter: int = 200,
              tol: float = 1e-4, n_seeds: int = 1):
    """Write the error curve; returns ``(paths, ElbowResult or None)``."""
    m = cs.load_cohort(input_prefix)
    curve = sweep_k(m, k_min, k_max, seed, max_iter, tol, n_seeds)
    write_error_curve(curve, out_tsv)
    result = find_elbow(curve) if len(curve.ks) >= 3 else None
    return [Path(out_tsv)], result


def rwc(input_prefix, k: int, runs: int, seed: int, out_tsv, max_iter: int = 200,
        tol: float = 1e-4, factors_dir=None) -> list[Path]:
    """Ensemble RWC table; optionally keep every run's factor container."""
    m = cs.load_cohort(input_prefix)
    paths = []

    def keep_factors(model):
        Path(factors_dir).mkdir(parents=True, exist_ok=True)
        p = Path(factors_dir) / f"factors_seed{model.seed}.bin"
        write_factor_model(model, p)
        paths.append(p)

    fw = rwc_ensemble(m, k, runs, seed, max_iter, tol,
                      callback=keep_factors if factors_dir is not None else None)
    write_rwc_tsv(fw, out_tsv)
    return [Path(out_tsv)] + paths


def select(rwc_tsv, out_tsv) -> list[Path]:
    """Re-derive the selection from the RWC table and write ``code<TAB>rwc``."""
    rows = read_rwc_tsv(rwc_tsv)
    w = np.array([r[1] for r in rows])
    chosen = select_features(w)
    with open(out_tsv, "w", encoding="utf-8", newline="") as fh:
        for j in chosen:
            fh.write(f"{rows[j][0]}\t{rows[j][1]!r}\n")
    return [Path(out_tsv)]


def read_selected(path) -> tuple[tuple[str, ...], np.ndarray]:
    codes, weights = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                c, w = line.rstrip("\n").split("\t")
                codes.append(c)
                weights.append(float(w))
    if not codes:
        raise DataError(f"{path}: no selected covariates")
    return tuple(codes), np.array(weights)


def prevalence_stage(diagnosed_prefix, undiagnosed_prefix, selected_tsv, out_tsv) -> list[Path]:
    codes, _ = read_selected(selected_tsv)
    pd = prevalence(cs.load_cohort(diagnosed_prefix), codes)
    pu = prevalence(cs.load_cohort(undiagnosed_prefix), codes)
    with open(out_tsv, "w", encoding="utf-8", newline="") as fh:
        for c, a, b in zip(codes, pd, pu):
            fh.write(f"{c}\t{float(a)!r}\t{float(b)!r}\n")
    return [Path(out_tsv)]


def kld(prevalence_tsv, out_tsv, epsilon: float = DEFAULT_EPSILON) -> list[Path]:
    codes, pd, pu = [], [], []
    with open(prevalence_tsv, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                c, a, b = line.rstrip("\n").split("\t")
                codes.append(c)
                pd.append(float(a))
                pu.append(float(b))
    d = np.atleast_1d(kl_divergence(np.array(pd), np.array(pu), epsilon))
    with open(out_tsv, "w", encoding="utf-8", newline="") as fh:
        for c, a, b, v in zip(codes, pd, pu, d):
            fh.write(f"{c}\t{a!r}\t{b!r}\t{float(v)!r}\n")
    return [Path(out_tsv)]


def load_model(selected_tsv, kld_tsv, epsilon: float = DEFAULT_EPSILON):
    """Selected weights aligned to the divergence table, as ``(weights, DivergenceTable)``."""
    codes, weights = read_selected(selected_tsv)
    divs = read_divergence_tsv(kld_tsv, epsilon)
    by_code = dict(zip(codes, weights))
    if set(by_code) != set(divs.covariates) or len(codes) != len(divs.covariates):
        raise DataError("selected covariates and divergence table disagree")
    return np.array([by_code[c] for c in divs.covariates]), divs


def reference_scores(reference_prefix, weights, divs: DivergenceTable) -> ReferenceDistribution:
    ref = cs.load_cohort(reference_prefix)
    raw = raw_scores(ref, divs.covariates, weights * divs.kl)
    return ReferenceDistribution(normalize_score(raw))


def score(cohort_prefix, selected_tsv, kld_tsv, reference_prefix, out_tsv,
          bounds=DEFAULT_BOUNDS) -> list[Path]:
    weights, divs = load_model(selected_tsv, kld_tsv)
    ref = reference_scores(reference_prefix, weights, divs)
    profiles = score_cohort(cs.load_cohort(cohort_prefix), weights, divs, ref, bounds)
    write_profiles_tsv(profiles, out_tsv)
    return [Path(out_tsv)]


def _band(m: cs.CohortMatrix, profiles, keep) -> cs.CohortMatrix:
    by_id = {p.patient_id: p.normalized_score for p in profiles}
    scores = np.array([by_id[pid] for pid in m.patient_ids])
    return m.take_rows(np.flatnonzero(keep(scores)))


def validate(out_dir, train_scores, validation_scores, undiagnosed_scores, train_prefix,
             undiagnosed_prefix, selected_tsv, thresholds=(0.1, 0.5, 1.0), repeats: int = 10,
             folds: int = 5, seed: int = 0, jaccard_k=(10, 25, 50, 100), high_band: float = 0.9,
             low_band: float = 0.1) -> list[Path]:
    """Score summaries, top-k Jaccard curves and the label-quality experiment."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_p = read_profiles_tsv(train_scores)
    undiag_p = read_profiles_tsv(undiagnosed_scores)
    summaries = [score_summary(train_p, "training")]
    val_p = read_profiles_tsv(validation_scores) if validation_scores else []
    if val_p:
        summaries.append(score_summary(val_p, "validation"))
    summaries.append(score_summary(undiag_p, "undiagnosed"))
    summary_path = out_dir / "summary.tsv"
    write_summary_tsv(summaries, summary_path)

    train = cs.load_cohort(train_prefix)
    undiag = cs.load_cohort(undiagnosed_prefix)
    notes = []
    hd = _band(train, train_p, lambda s: s >= high_band)
    hu = _band(undiag, undiag_p, lambda s: s >= high_band)
    lu = _band(undiag, undiag_p, lambda s: s <= low_band)
    ks = tuple(k for k in jaccard_k if k <= train.n_covariates)
    curves = []
    for other, name in ((hu, "high_undiagnosed"), (lu, "low_undiagnosed")):
        if hd.n_patients == 0 or other.n_patients == 0:
            notes.append(f"jaccard high_diagnosed|{name}: skipped, empty group")
            continue
        curves.append(jaccard_topk(hd, other, ks, "high_diagnosed", name))
    jaccard_path = out_dir / "jaccard.tsv"
    write_similarity_tsv(curves, jaccard_path)

    codes, _ = read_selected(selected_tsv)
    undiag_scores = np.array([p.normalized_score for p in undiag_p])
    report = label_quality_experiment(train, undiag, undiag_scores, codes, thresholds,
                                      repeats, folds, seed)
    lq_path = out_dir / "label_quality.tsv"
    write_label_quality_tsv(report, lq_path)

    text_path = out_dir / "report.txt"
    with open(text_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("score summaries (normalized scores)\n")
        for s in summaries:
            fh.write(f"  {s.cohort_name:<12} n={s.count:<8} mean={s.mean:.4f} "
                     f"median={s.median:.4f} max={s.maximum:.4f}\n")
        fh.write(f"\ntop-k Jaccard, high band >= {high_band}, low band <= {low_band}\n")
        fh.write(f"  group sizes: high_diagnosed={hd.n_patients} high_undiagnosed={hu.n_patients} "
                 f"low_undiagnosed={lu.n_patients}\n")
        for c in curves:
            vals = " ".join(f"k={k}:{j:.3f}" for k, j in zip(c.ks, c.jaccard))
            fh.write(f"  {c.pair_label}: {vals}\n")
        for n in notes:
            fh.write(f"  {n}\n")
        fh.write(f"\nlabel quality ({repeats} x {folds}-fold CV, {report.n_positives} positives)\n")
        for row in report.rows:
            cells = " ".join(
                f"{k}={row.metrics[k].mean:.4f} [{row.metrics[k].ci_low:.4f}, {row.metrics[k].ci_high:.4f}]"
                for k in METRICS
            )
            fh.write(f"  threshold <= {row.threshold:g}: {cells}\n")
    return [summary_path, jaccard_path, lq_path, text_path]
