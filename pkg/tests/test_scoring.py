import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from nmfrisk.cohort import CohortMatrix
from nmfrisk.divergence import DivergenceTable
from nmfrisk.exceptions import DataError, InvalidParameterError
from nmfrisk.scoring import (
    HIGH,
    LOW,
    MODERATE,
    ReferenceDistribution,
    RiskStratifier,
    categorize,
    normalize_score,
    percentile_rank,
    raw_score,
    read_profiles_tsv,
    score_cohort,
    write_profiles_tsv,
)
from nmfrisk.synth import SynthConfig, generate


def _divs(codes, kl):
    kl = np.asarray(kl, dtype=float)
    return DivergenceTable(tuple(codes), np.zeros_like(kl), np.zeros_like(kl), 1e-8, kl)


def test_raw_score_counts_presence_once():
    divs = _divs("AB", [0.5, 2.0])
    weights = [1.0, 0.25]
    assert raw_score({"A": 3, "B": 1, "Z": 9}, weights, divs) == pytest.approx(1.0)
    assert raw_score({"B": 7}, weights, divs) == pytest.approx(0.5)
    assert raw_score({}, weights, divs) == 0.0


def test_normalization_anchors():
    assert normalize_score(0.0) == 0.0
    assert normalize_score(1.0) == 0.5
    assert normalize_score(1000.0) == pytest.approx(0.999363, abs=1e-6)
    with pytest.raises(InvalidParameterError):
        normalize_score(-0.1)


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=50, unique=True))
def test_normalization_monotone_and_bounded(xs):
    xs = np.sort(xs)
    y = normalize_score(xs)
    assert np.all(np.diff(y) >= 0) and np.all((0 <= y) & (y < 1))


def test_percentile_mid_rank():
    ref = ReferenceDistribution([0.1, 0.2, 0.2, 0.4])
    np.testing.assert_allclose(percentile_rank([0.0, 0.1, 0.2, 0.3, 0.5], ref), [0, 12.5, 50, 75, 100])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=100)
def test_percentile_monotone(ref, a, b):
    lo, hi = sorted((a, b))
    r = ReferenceDistribution(ref)
    assert 0 <= percentile_rank(lo, r) <= percentile_rank(hi, r) <= 100


def test_category_boundaries_inclusive():
    assert list(categorize([0, 49.99, 50, 90, 90.01, 100])) == [LOW, LOW, MODERATE, MODERATE, HIGH, HIGH]
    assert categorize(30, (20, 40)) == MODERATE


@pytest.fixture(scope="module")
def pooled():
    cfg = SynthConfig(n_diagnosed=300, n_undiagnosed=600, n_covariates=60, n_components=3,
                      signature_size=5, seed=4)
    d, u, truth = generate(cfg)
    X = sp.vstack([d.X, u.X], format="csr")
    m = CohortMatrix(X, d.covariates, d.patient_ids + u.patient_ids, np.r_[d.labels, u.labels])
    return m, truth


def test_stratifier_end_to_end(pooled, tmp_path):
    m, truth = pooled
    est = RiskStratifier(n_components=3, n_runs=3, min_nnz=2, random_state=1).fit(m)
    s = est.score_samples(m)
    assert np.all((0 <= s) & (s < 1))
    raw = est.decision_function(m)
    np.testing.assert_allclose(s, np.arctan(raw) * 2 / np.pi)
    pct = est.percentile(m)
    assert np.all((0 <= pct) & (pct <= 100))
    cats = est.predict(m)
    assert set(cats) <= {LOW, MODERATE, HIGH}
    diag = m.labels
    assert s[diag].mean() > s[~diag].mean() + 0.15
    profiles = est.profile(m)
    assert [p.patient_id for p in profiles] == list(m.patient_ids)
    write_profiles_tsv(profiles, tmp_path / "p.tsv")
    assert read_profiles_tsv(tmp_path / "p.tsv") == profiles
    again = RiskStratifier.from_components(est.feature_weights_, est.divergence_, est.reference_)
    np.testing.assert_array_equal(again.score_samples(m), s)
    again_cohort = score_cohort(m, est.feature_weights_, est.divergence_, est.reference_)
    assert again_cohort == profiles


def test_stratifier_params_and_validation(pooled):
    m, _ = pooled
    est = RiskStratifier(n_components=3, n_runs=2)
    assert clone(est).get_params()["n_components"] == 3
    with pytest.raises(DataError):
        est.fit(m.X)
    with pytest.raises(InvalidParameterError):
        RiskStratifier(prevalence_cohort="nope").fit(m)


@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=30),
       st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=100)
def test_categories_same_on_raw_and_normalized(ref_raw, raw):
    ref_raw, raw = np.array(ref_raw), np.array(raw)
    # atan is strictly increasing, so percentiles and categories cannot change
    by_norm = categorize(percentile_rank(normalize_score(raw), ReferenceDistribution(normalize_score(ref_raw))))
    by_raw = categorize(percentile_rank(raw, ReferenceDistribution(ref_raw)))
    assert list(np.atleast_1d(by_norm)) == list(np.atleast_1d(by_raw))
