import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nmfrisk.cohort import CohortMatrix
from nmfrisk.divergence import (
    divergence_table,
    kl_divergence,
    prevalence,
    read_divergence_tsv,
    write_divergence_tsv,
)
from nmfrisk.exceptions import DataError, InvalidParameterError

probs = st.floats(0, 1, allow_nan=False)


def _cohort(dense, codes, diagnosed):
    X = sp.csr_matrix(np.asarray(dense, dtype=np.uint32))
    return CohortMatrix(X, tuple(codes), tuple(f"p{i}" for i in range(X.shape[0])),
                        np.full(X.shape[0], diagnosed))


def test_reference_value():
    # Bernoulli KL in nats, by hand: 0.2701 ln(0.2701/0.1763) + 0.7299 ln(0.7299/0.8237)
    want = 0.2701 * math.log(0.2701 / 0.1763) + 0.7299 * math.log(0.7299 / 0.8237)
    assert kl_divergence(0.2701, 0.1763) == pytest.approx(want, abs=1e-7)
    assert abs(kl_divergence(0.2701, 0.1763) - 0.02695) <= 1e-4


def test_boundaries_are_finite():
    assert math.isfinite(kl_divergence(1.0, 0.0))
    assert math.isfinite(kl_divergence(0.0, 1.0))
    assert kl_divergence(0.0, 0.0) == 0.0


def test_rejects_out_of_range():
    with pytest.raises(InvalidParameterError):
        kl_divergence(1.2, 0.3)
    with pytest.raises(InvalidParameterError):
        kl_divergence(0.2, 0.3, eps=0)


@given(probs, probs)
@settings(max_examples=200)
def test_kl_non_negative(p, q):
    assert kl_divergence(p, q) >= -1e-15


@given(probs)
def test_kl_zero_on_equal(p):
    assert kl_divergence(p, p) == 0.0


def test_prevalence_by_code_and_index():
    m = _cohort([[1, 0, 2], [0, 0, 1], [3, 0, 0], [0, 0, 5]], "ABC", True)
    np.testing.assert_allclose(prevalence(m), [0.5, 0.0, 0.75])
    np.testing.assert_allclose(prevalence(m, ["C", "Z", "A"]), [0.75, 0.0, 0.5])
    np.testing.assert_allclose(prevalence(m, [2]), [0.75])
    with pytest.raises(InvalidParameterError):
        prevalence(m, [7])
    with pytest.raises(DataError):
        prevalence(_cohort(np.zeros((0, 3)), "ABC", True))


def test_divergence_table_aligns_codes(tmp_path):
    d = _cohort([[1, 1, 0], [1, 0, 0]], "ABC", True)
    u = _cohort([[0, 1], [0, 0], [1, 0], [0, 0]], "BA", False)
    t = divergence_table(d, u, ["A", "B"])
    np.testing.assert_allclose(t.p_diagnosed, [1.0, 0.5])
    np.testing.assert_allclose(t.p_undiagnosed, [0.25, 0.25])
    np.testing.assert_allclose(t.kl, kl_divergence(t.p_diagnosed, t.p_undiagnosed))
    write_divergence_tsv(t, tmp_path / "k.tsv")
    back = read_divergence_tsv(tmp_path / "k.tsv")
    assert back.covariates == ("A", "B")
    np.testing.assert_array_equal(back.kl, t.kl)
