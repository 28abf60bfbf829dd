"""Functional-relationship probing of a trained fusion model.

Synthetic measure vectors are drawn from a multivariate normal fitted to
the normalized training features (preserving inter-measure correlations),
pushed through the model, and summarized per probed measure as 200
equal-count bins; repeating with fresh draws yields a mean curve and a
standard-deviation band per prediction head.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fusion_model import FusionModel, forward
from .stats import denormalize_target


@dataclass(frozen=True)
class GaussianSpec:
    """Mean/covariance of normalized features, with a diagonal ridge."""

    mean: np.ndarray
    covariance: np.ndarray
    ridge: float

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric within 1e-12")

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise ValueError("covariance not positive definite after ridge") from None


@dataclass
class ProbeCurve:
    """Per-measure relationship curve: bin centers plus mean/std per head."""

    measure: str
    x: np.ndarray
    head_means: dict[str, np.ndarray]
    head_stds: dict[str, np.ndarray]
    reps: int
    samples_per_rep: int


def fit_gaussian(features_norm, ridge: float = 1e-6) -> GaussianSpec:
    """Sample mean and covariance of normalized training features.

    Requires at least input_dim + 1 rows; ``ridge`` is added to the
    covariance diagonal so the Cholesky factorization is well posed even
    for near-degenerate features.
    """
    x = np.asarray(features_norm, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} rows to fit a {d}-dim Gaussian")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(d)
    spec = GaussianSpec(mean=mean, covariance=cov, ridge=ridge)
    spec.cholesky()  # fail fast if non-PSD despite the ridge
    return spec


def probe_measure(
    model: FusionModel,
    spec: GaussianSpec,
    measure_index: int,
    reps: int = 1000,
    samples_per_rep: int = 10000,
    bins: int = 200,
    seed: int = 0,
) -> ProbeCurve:
    """Probe one input measure of a trained model.

    Per repetition: draw samples from the Gaussian, predict, sort by the
    probed measure and average predictions within ``bins`` equal-count
    bins. Across repetitions the per-bin means and standard deviations
    form the curve and its uncertainty band. Bin x-values are reported on
    the denormalized measure scale.
    """
    if model.normalizer is None:
        raise ValueError("model has no normalizer snapshot; train or load first")
    d = spec.mean.size
    if not 0 <= measure_index < d:
        raise ValueError(f"measure index {measure_index} outside [0, {d})")
    if model.input_dim != d:
        raise ValueError("Gaussian dimension does not match model input_dim")
    if reps < 2:
        raise ValueError("reps must be >= 2 for a standard deviation")
    if samples_per_rep % bins != 0:
        raise ValueError("samples_per_rep must be divisible by bins")
    per_bin = samples_per_rep // bins
    chol = spec.cholesky()
    children = np.random.SeedSequence(seed).spawn(reps)
    n_heads = model.n_heads
    x_curves = np.empty((reps, bins))
    pred_curves = np.empty((reps, bins, n_heads))
    for r in range(reps):
        rng = np.random.default_rng(children[r])
        z = rng.standard_normal((samples_per_rep, d))
        samples = spec.mean + z @ chol.T
        preds = forward(model, samples)
        order = np.argsort(samples[:, measure_index], kind="mergesort")
        x_sorted = samples[order, measure_index].reshape(bins, per_bin)
        p_sorted = preds[order].reshape(bins, per_bin, n_heads)
        x_curves[r] = x_sorted.mean(axis=1)
        pred_curves[r] = p_sorted.mean(axis=1)
    measure_name = model.normalizer.names[measure_index]
    x_raw = model.normalizer.invert_feature(measure_name, x_curves.mean(axis=0))
    head_means = {}
    head_stds = {}
    for h, head in enumerate(model.heads):
        denorm = denormalize_target(pred_curves[:, :, h], head)
        head_means[head] = denorm.mean(axis=0)
        head_stds[head] = denorm.std(axis=0)
    return ProbeCurve(
        measure=measure_name,
        x=x_raw,
        head_means=head_means,
        head_stds=head_stds,
        reps=reps,
        samples_per_rep=samples_per_rep,
    )


def write_probe_csv(curve: ProbeCurve, path) -> None:
    """CSV export: measure, bin_index, x, q_mean, q_std, i_mean, i_std."""
    q_mean = curve.head_means.get("quality")
    q_std = curve.head_stds.get("quality")
    i_mean = curve.head_means.get("intelligibility")
    i_std = curve.head_stds.get("intelligibility")

    def _cell(arr, i):
        return "" if arr is None else repr(float(arr[i]))

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["measure", "bin_index", "x", "q_mean", "q_std", "i_mean", "i_std"])
        for i in range(curve.x.size):
            writer.writerow(
                [
                    curve.measure,
                    i,
                    repr(float(curve.x[i])),
                    _cell(q_mean, i),
                    _cell(q_std, i),
                    _cell(i_mean, i),
                    _cell(i_std, i),
                ]
            )
