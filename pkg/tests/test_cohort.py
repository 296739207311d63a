import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nmfrisk.cohort import (
    CohortMatrix,
    filter_min_support,
    ingest_events,
    load_cohort,
    read_csr,
    read_events_tsv,
    read_labels_tsv,
    save_cohort,
    split_train_validation,
    write_csr,
    write_events_tsv,
    write_labels_tsv,
)
from nmfrisk.exceptions import DataError, InvalidParameterError

EVENTS = [
    ("p1", "A", 2),
    ("p2", "B", 1),
    ("p1", "C", 1),
    ("p1", "A", 3),
    ("p3", "B", 0),
]
LABELS = {"p1": True, "p2": False, "p3": True}


def test_ingest_orders_and_sums():
    m = ingest_events(EVENTS, LABELS)
    assert m.patient_ids == ("p1", "p2", "p3")
    assert m.covariates == ("A", "B", "C")
    np.testing.assert_array_equal(m.X.toarray(), [[5, 0, 1], [0, 1, 0], [0, 0, 0]])
    assert m.X.dtype == np.uint32
    np.testing.assert_array_equal(m.labels, [True, False, True])
    assert m.nnz == 3
    np.testing.assert_array_equal(m.row_nnz, [2, 1, 0])


def test_ingest_rejects_bad_records():
    with pytest.raises(DataError, match="no label"):
        ingest_events([("ghost", "A", 1)], LABELS)
    with pytest.raises(DataError, match="negative"):
        ingest_events([("p1", "A", -1)], LABELS)


def test_cohort_is_read_only():
    m = ingest_events(EVENTS, LABELS)
    with pytest.raises(ValueError):
        m.X.data[0] = 9
    with pytest.raises(ValueError):
        m.labels[0] = False


def test_cohort_validates_shapes():
    X = sp.csr_matrix(np.ones((2, 2), dtype=np.uint32))
    with pytest.raises(DataError):
        CohortMatrix(X, ("a",), ("r1", "r2"), np.array([True, False]))
    with pytest.raises(DataError):
        CohortMatrix(X, ("a", "a"), ("r1", "r2"), np.array([True, False]))


def test_diagnosed_and_undiagnosed_partition():
    m = ingest_events(EVENTS, LABELS)
    assert m.diagnosed().patient_ids == ("p1", "p3")
    assert m.undiagnosed().patient_ids == ("p2",)


def test_filter_min_support():
    m = ingest_events(EVENTS, LABELS)
    assert filter_min_support(m, 2).patient_ids == ("p1",)
    assert filter_min_support(m, 0) is m
    with pytest.raises(InvalidParameterError):
        filter_min_support(m, -1)


def test_split_is_seeded_and_ordered():
    X = sp.csr_matrix(np.eye(20, dtype=np.uint32))
    m = CohortMatrix(X, tuple(f"c{i}" for i in range(20)), tuple(f"p{i:02d}" for i in range(20)),
                     np.ones(20, dtype=bool))
    a = split_train_validation(m, 5, 3)
    b = split_train_validation(m, 5, 3)
    assert a.validation.patient_ids == b.validation.patient_ids
    assert a.training.n_patients == 15
    assert list(a.training.patient_ids) == sorted(a.training.patient_ids)
    assert set(a.training.patient_ids).isdisjoint(a.validation.patient_ids)
    with pytest.raises(InvalidParameterError):
        split_train_validation(m, 21, 0)


def test_tsv_round_trip(tmp_path):
    m = ingest_events(EVENTS, LABELS)
    write_events_tsv(m, tmp_path / "e.tsv")
    write_labels_tsv(m, tmp_path / "l.tsv")
    again = ingest_events(read_events_tsv(tmp_path / "e.tsv"), read_labels_tsv(tmp_path / "l.tsv"))
    assert again.patient_ids == m.patient_ids
    np.testing.assert_array_equal(again.labels, m.labels)
    # columns may be re-ordered by first appearance; compare by code
    for code in m.covariates:
        np.testing.assert_array_equal(
            again.X[:, again.covariate_dict[code]].toarray(), m.X[:, m.covariate_dict[code]].toarray()
        )


def test_csr_container_round_trip_and_corruption(tmp_path):
    m = ingest_events(EVENTS, LABELS)
    path = tmp_path / "x.csr"
    write_csr(m.X, path)
    back = read_csr(path)
    assert (back != m.X).nnz == 0
    raw = bytearray(path.read_bytes())
    (tmp_path / "short.csr").write_bytes(bytes(raw[:-4]))
    with pytest.raises(DataError):
        read_csr(tmp_path / "short.csr")
    raw[0] ^= 0xFF
    (tmp_path / "magic.csr").write_bytes(bytes(raw))
    with pytest.raises(DataError):
        read_csr(tmp_path / "magic.csr")


def test_save_and_load_cohort(tmp_path):
    m = ingest_events(EVENTS, LABELS)
    save_cohort(m, tmp_path / "c")
    back = load_cohort(tmp_path / "c")
    assert back.covariates == m.covariates and back.patient_ids == m.patient_ids
    np.testing.assert_array_equal(back.labels, m.labels)
    assert (back.X != m.X).nnz == 0


records = st.lists(
    st.tuples(st.sampled_from(["p1", "p2", "p3"]), st.sampled_from(list("ABCDE")), st.integers(0, 50)),
    max_size=40,
)


@given(records)
@settings(max_examples=60, deadline=None)
def test_ingest_preserves_totals(recs):
    m = ingest_events(recs, LABELS)
    dense = m.X.toarray()
    for pid, i in zip(m.patient_ids, range(m.n_patients)):
        for code, j in m.covariate_dict.items():
            assert dense[i, j] == sum(c for p, k, c in recs if p == pid and k == code)
    assert np.all(m.X.data > 0)
    assert m.X.has_sorted_indices
