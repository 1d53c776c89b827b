"""Representation statistics: sparsity, intra-class distance, redundancy, coding length.

All four are pure functions on a feature matrix. The report helper first
row-normalizes features, then evaluates every metric on the normalized matrix
with the parameters recorded next to the values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPARSITY_THRESHOLD = 1e-5
CODING_EPS2 = 0.5


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    sparsity: float
    intra_class_l2: float
    redundancy: float
    coding_length: float
    params: dict = field(default_factory=dict)
    dataset_group: str = ""
    zero_rows: int = 0

    def to_dict(self) -> dict:
        return {
            "sparsity": self.sparsity,
            "intra_class_l2": self.intra_class_l2,
            "redundancy": self.redundancy,
            "coding_length": self.coding_length,
            "params": self.params,
            "dataset_group": self.dataset_group,
            "zero_rows": self.zero_rows,
        }


def l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    """Scale each row to unit length; all-zero rows stay zero."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return X / safe


def count_zero_rows(X: np.ndarray) -> int:
    return int(np.sum(np.all(np.asarray(X) == 0.0, axis=1)))


def sparsity_ratio(X: np.ndarray, threshold: float = SPARSITY_THRESHOLD) -> float:
    """Fraction of entries with magnitude below the threshold."""
    X = np.asarray(X)
    if X.size == 0:
        raise MetricsError("sparsity of an empty matrix is undefined")
    return float(np.mean(np.abs(X) < threshold))


def intra_class_distance(X: np.ndarray, labels: np.ndarray) -> float:
    """Mean pairwise distance within each class, macro-averaged over classes.

    Classes with a single sample are skipped; if none has two, this is an error.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = []
    for c in np.unique(labels):
        rows = X[labels == c]
        m = rows.shape[0]
        if m < 2:
            continue
        diffs = rows[:, None, :] - rows[None, :, :]
        dists = np.sqrt(np.sum(diffs**2, axis=-1))
        iu = np.triu_indices(m, k=1)
        per_class.append(float(np.mean(dists[iu])))
    if not per_class:
        raise MetricsError("no class has at least two samples")
    return float(np.mean(per_class))


def feature_redundancy(X: np.ndarray) -> float:
    """Mean absolute Pearson correlation over all d*d dimension pairs.

    The diagonal counts (rho=1), so the result is bounded below by 1/d.
    A constant column correlates with nothing: rho is taken as 0 off the
    diagonal rather than propagating NaN.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise MetricsError("need at least two samples for correlations")
    centered = X - X.mean(axis=0, keepdims=True)
    std = centered.std(axis=0)
    nonconstant = std > 0.0
    denom = np.where(nonconstant, std, 1.0)
    Z = centered / denom
    corr = (Z.T @ Z) / n
    corr[~nonconstant, :] = 0.0
    corr[:, ~nonconstant] = 0.0
    np.fill_diagonal(corr, 1.0)
    np.clip(corr, -1.0, 1.0, out=corr)
    return float(np.sum(np.abs(corr)) / (d * d))


def coding_length(X: np.ndarray, eps2: float = CODING_EPS2, log_base: float = math.e) -> float:
    """Rate-distortion coding length 0.5 * log det(I + d/(N eps^2) X^T X).

    Evaluated through the eigenvalues of the smaller Gram matrix, which is
    stable for rank-deficient X (zero eigenvalues contribute nothing).
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise MetricsError("features contain NaN or Inf")
    n, d = X.shape
    if n == 0:
        raise MetricsError("empty feature matrix")
    gram = X @ X.T if n < d else X.T @ X
    eigvals = np.linalg.eigvalsh(gram)
    eigvals = np.clip(eigvals, 0.0, None)
    value = 0.5 * float(np.sum(np.log1p((d / (n * eps2)) * eigvals)))
    if log_base != math.e:
        value /= math.log(log_base)
    return value


def compute_report(
    X: np.ndarray,
    labels: np.ndarray,
    threshold: float = SPARSITY_THRESHOLD,
    eps2: float = CODING_EPS2,
    log_base: float = math.e,
    dataset_group: str = "",
) -> MetricsReport:
    """Row-normalize, then compute all four statistics."""
    Xn = l2_normalize_rows(X)
    return MetricsReport(
        sparsity=sparsity_ratio(Xn, threshold),
        intra_class_l2=intra_class_distance(Xn, labels),
        redundancy=feature_redundancy(Xn),
        coding_length=coding_length(Xn, eps2, log_base),
        params={"threshold": threshold, "eps2": eps2, "log_base": log_base},
        dataset_group=dataset_group,
        zero_rows=count_zero_rows(X),
    )
