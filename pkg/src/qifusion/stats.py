"""Correlation/error metrics and min-max feature normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Subjective score scales are fixed by the rating protocol, so targets are
# normalized with these theoretical ranges rather than empirical min/max.
QUALITY_RANGE = (1.0, 5.0)
INTELLIGIBILITY_RANGE = (0.0, 10.0)
TARGET_RANGES = {
    "quality": QUALITY_RANGE,
    "intelligibility": INTELLIGIBILITY_RANGE,
}


def _as_1d(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        a = a.reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient of two equal-length sequences."""
    a = _as_1d(x, "x")
    b = _as_1d(y, "y")
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least 2 samples")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0.0:
        raise ValueError("zero variance input")
    return float(np.dot(a, b) / denom)


def rank_average_ties(x) -> np.ndarray:
    """1-based ranks; tied values receive the mean of the ranks they span."""
    a = _as_1d(x, "x")
    n = a.size
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation: Pearson on average-tie ranks."""
    return pearson(rank_average_ties(x), rank_average_ties(y))


def mse(pred, target) -> float:
    """Mean squared error between two equal-length sequences."""
    p = _as_1d(pred, "pred")
    t = _as_1d(target, "target")
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size < 1:
        raise ValueError("need at least 1 sample")
    d = p - t
    return float(np.dot(d, d) / d.size)


@dataclass(frozen=True)
class Normalizer:
    """Per-feature min-max transform fitted on training rows only.

    ``apply`` maps each feature to [0, 1], clamping out-of-range values
    (e.g. unseen test extremes); ``invert`` is the plain affine inverse and
    does not undo clamping.
    """

    names: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray

    def apply(self, x, with_mask: bool = False):
        a = np.asarray(x, dtype=np.float64)
        scaled = (a - self.mins) / (self.maxs - self.mins)
        clipped = np.clip(scaled, 0.0, 1.0)
        if with_mask:
            return clipped, scaled != clipped
        return clipped

    def invert(self, x) -> np.ndarray:
        a = np.asarray(x, dtype=np.float64)
        return self.mins + a * (self.maxs - self.mins)

    def invert_feature(self, name: str, values) -> np.ndarray:
        i = self.names.index(name)
        a = np.asarray(values, dtype=np.float64)
        return self.mins[i] + a * (self.maxs[i] - self.mins[i])

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "min": [float(v) for v in self.mins],
            "max": [float(v) for v in self.maxs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            names=tuple(d["names"]),
            mins=np.asarray(d["min"], dtype=np.float64),
            maxs=np.asarray(d["max"], dtype=np.float64),
        )


def fit_normalizer(features, names, fixed_ranges: dict | None = None) -> Normalizer:
    """Fit per-feature min/max on a [rows x features] training matrix.

    ``fixed_ranges`` pins selected features to theoretical bounds instead of
    empirical ones (used for the subjective-quality input of the augmented
    predictor). A constant feature without a fixed range is a fit error.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(names):
        raise ValueError("features must be a [rows x len(names)] matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    mins = x.min(axis=0)
    maxs = x.max(axis=0)
    fixed_ranges = fixed_ranges or {}
    for name, (lo, hi) in fixed_ranges.items():
        i = list(names).index(name)
        mins[i], maxs[i] = float(lo), float(hi)
    degenerate = [n for n, lo, hi in zip(names, mins, maxs) if not hi > lo]
    if degenerate:
        raise ValueError(f"degenerate (constant) features: {degenerate}")
    return Normalizer(names=tuple(names), mins=mins, maxs=maxs)


def normalize_target(values, head: str) -> np.ndarray:
    lo, hi = TARGET_RANGES[head]
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)


def denormalize_target(values, head: str) -> np.ndarray:
    lo, hi = TARGET_RANGES[head]
    return lo + np.asarray(values, dtype=np.float64) * (hi - lo)


def correlation_matrix(columns, names) -> np.ndarray:
    """Symmetric matrix of pairwise Pearson correlations.

    ``columns`` is a [rows x k] matrix whose k columns are named by
    ``names`` (e.g. twelve objective measures plus the two subjective
    scores). Requires at least 2 rows.
    """
    x = np.asarray(columns, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(names):
        raise ValueError("columns must be a [rows x len(names)] matrix")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    k = x.shape[1]
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            r = pearson(x[:, i], x[:, j])
            out[i, j] = r
            out[j, i] = r
    return out
