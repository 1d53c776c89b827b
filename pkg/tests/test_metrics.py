import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datasetclone.metrics import (
    MetricsError,
    coding_length,
    compute_report,
    count_zero_rows,
    feature_redundancy,
    intra_class_distance,
    l2_normalize_rows,
    sparsity_ratio,
)


def naive_redundancy(X):
    """Two-pass Pearson loop, constant columns as rho=0 off-diagonal."""
    n, d = X.shape
    total = 0.0
    for i in range(d):
        for j in range(d):
            if i == j:
                total += 1.0
                continue
            xi, xj = X[:, i], X[:, j]
            si, sj = xi.std(), xj.std()
            if si == 0 or sj == 0:
                continue
            rho = ((xi - xi.mean()) * (xj - xj.mean())).mean() / (si * sj)
            total += abs(rho)
    return total / (d * d)


def naive_coding_length(X, eps2=0.5):
    n, d = X.shape
    m = np.eye(d) + (d / (n * eps2)) * (X.T @ X)
    sign, logdet = np.linalg.slogdet(m)
    assert sign > 0
    return 0.5 * logdet


def test_normalize_three_four_five():
    out = l2_normalize_rows(np.array([[3.0, 4.0]]))
    assert np.allclose(out, [[0.6, 0.8]])


def test_normalize_unit_row_unchanged():
    row = np.array([[0.0, 1.0, 0.0]])
    assert np.allclose(l2_normalize_rows(row), row)


def test_normalize_zero_row_stays_zero_and_is_counted():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    out = l2_normalize_rows(X)
    assert np.array_equal(out[0], [0.0, 0.0])
    assert count_zero_rows(X) == 1


def test_sparsity_one_hot_rows_exact():
    d = 2048
    X = np.zeros((4, d))
    X[np.arange(4), [5, 99, 7, 2000]] = 1.0
    assert sparsity_ratio(X) == (d - 1) / d


def test_sparsity_dense_rows_zero():
    d = 16
    X = np.full((3, d), 1.0 / math.sqrt(d))
    assert sparsity_ratio(X) == 0.0


def test_sparsity_counts_explicitly_zeroed_entries():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 8)) + 1.0
    flat = X.ravel()
    zero_at = rng.choice(flat.size, size=13, replace=False)
    flat[zero_at] = 0.0
    assert sparsity_ratio(flat.reshape(5, 8)) == 13 / 40


def test_sparsity_empty_matrix_errors():
    with pytest.raises(MetricsError):
        sparsity_ratio(np.zeros((0, 4)))


def test_sparsity_monotone_in_threshold():
    rng = np.random.default_rng(1)
    X = rng.normal(scale=1e-4, size=(10, 10))
    values = [sparsity_ratio(X, t) for t in (1e-6, 1e-5, 1e-4, 1e-3)]
    assert values == sorted(values)
    assert all(0.0 <= v <= 1.0 for v in values)


def test_intra_class_identical_rows_zero():
    X = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert intra_class_distance(X, np.array([0, 0])) == 0.0


def test_intra_class_orthonormal_pair_sqrt2():
    X = np.eye(2)
    assert intra_class_distance(X, np.array([0, 0])) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_intra_class_three_orthonormal_rows():
    X = np.eye(3)
    assert intra_class_distance(X, np.zeros(3, dtype=int)) == pytest.approx(
        math.sqrt(2), abs=1e-12
    )


def test_intra_class_macro_average_and_singleton_skip():
    X = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0], [1.0, 0.0], [1.0, 4.0]])
    labels = np.array([0, 0, 1, 2, 2])
    # class 0 distance 2, class 1 skipped (singleton), class 2 distance 4
    assert intra_class_distance(X, labels) == pytest.approx(3.0)


def test_intra_class_requires_a_pair():
    with pytest.raises(MetricsError):
        intra_class_distance(np.eye(3), np.array([0, 1, 2]))


def test_redundancy_identical_columns():
    x = np.array([1.0, 2.0, 5.0, -1.0])
    assert feature_redundancy(np.stack([x, x], axis=1)) == pytest.approx(1.0)


def test_redundancy_anticorrelated_columns():
    x = np.array([1.0, 2.0, 5.0, -1.0])
    assert feature_redundancy(np.stack([x, -x], axis=1)) == pytest.approx(1.0)


def test_redundancy_plus_minus_basis_half():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    assert feature_redundancy(X) == pytest.approx(0.5, abs=1e-12)


def test_redundancy_constant_column_contributes_zero_off_diagonal():
    X = np.array([[1.0, 3.0], [2.0, 3.0], [4.0, 3.0]])
    # diagonal gives 2, off-diagonal 0 -> 2/4
    assert feature_redundancy(X) == pytest.approx(0.5)


def test_redundancy_needs_two_samples():
    with pytest.raises(MetricsError):
        feature_redundancy(np.ones((1, 3)))


def test_redundancy_lower_bound_is_diagonal():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 6))
    value = feature_redundancy(X)
    assert 1 / 6 <= value <= 1.0


def test_coding_length_zero_matrix_exactly_zero():
    assert coding_length(np.zeros((3, 5))) == 0.0
    assert coding_length(np.zeros((7, 2))) == 0.0


def test_coding_length_identity_matches_log3():
    assert coding_length(np.eye(2), eps2=0.5) == pytest.approx(math.log(3), abs=1e-9)


def test_coding_length_row_permutation_invariant():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(9, 4))
    perm = rng.permutation(9)
    assert coding_length(X[perm]) == pytest.approx(coding_length(X), abs=1e-9)


def test_coding_length_orthogonal_right_multiplication_invariant():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(8, 5))
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert coding_length(X @ Q) == pytest.approx(coding_length(X), abs=1e-9)


def test_coding_length_grows_with_new_row_direction():
    X = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    grown = np.vstack([X, [0.0, 3.0, 0.0]])
    assert coding_length(grown) > coding_length(X)


def test_coding_length_log_base_two():
    nats = coding_length(np.eye(2))
    bits = coding_length(np.eye(2), log_base=2.0)
    assert bits == pytest.approx(nats / math.log(2), abs=1e-12)


def test_coding_length_rejects_non_finite():
    with pytest.raises(MetricsError):
        coding_length(np.array([[np.inf, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_oracle_equivalence_on_small_matrices(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    d = int(rng.integers(1, 9))
    X = rng.normal(size=(n, d))
    if rng.random() < 0.3 and d > 1:
        X[:, int(rng.integers(0, d))] = rng.normal()  # constant column
    assert feature_redundancy(X) == pytest.approx(naive_redundancy(X), abs=1e-12)
    assert coding_length(X) == pytest.approx(naive_coding_length(X), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_intra_class_distance_of_normalized_rows_bounded(seed):
    rng = np.random.default_rng(seed)
    X = l2_normalize_rows(rng.normal(size=(10, 4)))
    labels = rng.integers(0, 3, size=10)
    if all(np.sum(labels == c) < 2 for c in range(3)):
        return
    assert 0.0 <= intra_class_distance(X, labels) <= 2.0


def test_compute_report_normalizes_first():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(12, 6)) * 100.0
    labels = rng.integers(0, 3, size=12)
    report = compute_report(X, labels, dataset_group="unit")
    Xn = l2_normalize_rows(X)
    assert report.sparsity == sparsity_ratio(Xn)
    assert report.coding_length == pytest.approx(coding_length(Xn))
    assert report.params == {"threshold": 1e-5, "eps2": 0.5, "log_base": math.e}
    assert report.dataset_group == "unit"
    assert report.zero_rows == 0
    payload = report.to_dict()
    assert set(payload) == {
        "sparsity", "intra_class_l2", "redundancy", "coding_length",
        "params", "dataset_group", "zero_rows",
    }
