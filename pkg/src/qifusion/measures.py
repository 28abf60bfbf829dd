"""Native intrusive intelligibility measures: STOI, ESTOI and NCM.

All three compare a degraded/processed signal against its clean reference
at a 10 kHz operating rate. Scores are returned raw (not clamped to their
nominal [0, 1] ranges); normalization happens downstream in the fusion
pipeline. Zero-energy segments or bands contribute a correlation of 0 so
results stay deterministic and independent of content-specific skipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_core import (
    AudioBuffer,
    band_envelope,
    remove_silent_frames,
    resample,
    stft,
    third_octave_bands,
)

OPERATING_RATE_HZ = 10000

# Short-time front end shared by STOI and ESTOI.
FRAME_LEN = 256
HOP = 128
FFT_LEN = 512
NUM_BANDS = 15
CF_MIN_HZ = 150.0
SEGMENT_FRAMES = 30  # ~384 ms at 10 kHz
SILENCE_DYN_RANGE_DB = 40.0
CLIP_DB = -15.0  # lower bound on the signal-to-distortion ratio

# NCM band layout: contiguous log-spaced analysis bands over the telephone
# speech range, uniform band-importance weights.
NCM_NUM_BANDS = 20
NCM_LO_HZ = 150.0
NCM_HI_HZ = 4000.0
NCM_ENV_RATE_HZ = 25.0
NCM_SNR_FLOOR_DB = -15.0
NCM_SNR_CEIL_DB = 15.0


@dataclass(frozen=True)
class MeasureScore:
    """A named objective score."""

    name: str
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.name} score is not finite")
        object.__setattr__(self, "value", float(self.value))

    def __float__(self) -> float:
        return self.value


def _to_operating_rate(clean: AudioBuffer, deg: AudioBuffer) -> tuple[AudioBuffer, AudioBuffer]:
    x = resample(clean, OPERATING_RATE_HZ)
    y = resample(deg, OPERATING_RATE_HZ)
    n = min(x.samples.size, y.samples.size)
    if x.samples.size != y.samples.size:
        x = AudioBuffer(x.samples[:n], OPERATING_RATE_HZ)
        y = AudioBuffer(y.samples[:n], OPERATING_RATE_HZ)
    return x, y


def _band_segments(clean: AudioBuffer, deg: AudioBuffer) -> tuple[np.ndarray, np.ndarray]:
    """Sliding 30-frame one-third-octave segments, shape [segments, bands, frames]."""
    x, y = _to_operating_rate(clean, deg)
    x, y = remove_silent_frames(x, y, SILENCE_DYN_RANGE_DB, FRAME_LEN, HOP)
    if x.samples.size < FRAME_LEN:
        raise ValueError("too short: no frames after silence removal")
    xs = stft(x, FRAME_LEN, HOP, FFT_LEN)
    ys = stft(y, FRAME_LEN, HOP, FFT_LEN)
    xb = third_octave_bands(xs, NUM_BANDS, CF_MIN_HZ).energies.T  # [bands, frames]
    yb = third_octave_bands(ys, NUM_BANDS, CF_MIN_HZ).energies.T
    n_frames = xb.shape[1]
    if n_frames < SEGMENT_FRAMES:
        raise ValueError(
            f"too short: {n_frames} frames after silence removal, need {SEGMENT_FRAMES}"
        )
    # sliding windows with hop 1: [bands, segments, frames] -> [segments, bands, frames]
    xw = np.lib.stride_tricks.sliding_window_view(xb, SEGMENT_FRAMES, axis=1)
    yw = np.lib.stride_tricks.sliding_window_view(yb, SEGMENT_FRAMES, axis=1)
    return xw.transpose(1, 0, 2).copy(), yw.transpose(1, 0, 2).copy()


def _rowwise_correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation along the last axis; zero variance gives 0."""
    ac = a - a.mean(axis=-1, keepdims=True)
    bc = b - b.mean(axis=-1, keepdims=True)
    num = np.sum(ac * bc, axis=-1)
    den = np.sqrt(np.sum(ac * ac, axis=-1) * np.sum(bc * bc, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    return corr


def stoi(clean: AudioBuffer, deg: AudioBuffer) -> MeasureScore:
    """Short-time objective intelligibility of deg against clean.

    Per band and 30-frame sliding segment, the degraded band vector is
    energy-normalized to the clean one, clipped element-wise at
    (1 + 10^(-15/20)) times the clean vector, and correlated with it; the
    score is the mean correlation over all band/segment pairs.
    """
    xs, ys = _band_segments(clean, deg)
    x_norm = np.linalg.norm(xs, axis=-1, keepdims=True)
    y_norm = np.linalg.norm(ys, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(y_norm > 0.0, x_norm / np.where(y_norm > 0.0, y_norm, 1.0), 0.0)
    y_scaled = ys * alpha
    y_clipped = np.minimum(y_scaled, xs * (1.0 + 10.0 ** (CLIP_DB / 20.0)))
    corr = _rowwise_correlation(xs, y_clipped)
    return MeasureScore("stoi", float(corr.mean()))


def _row_col_normalize(seg: np.ndarray) -> np.ndarray:
    """Mean-subtract and unit-normalize rows, then columns, of each segment.

    Degenerate (zero-norm) rows or columns are left as zeros so they
    contribute nothing to the inner products.
    """
    out = seg - seg.mean(axis=-1, keepdims=True)
    norms = np.linalg.norm(out, axis=-1, keepdims=True)
    out = np.where(norms > 0.0, out / np.where(norms > 0.0, norms, 1.0), 0.0)
    out = out - out.mean(axis=-2, keepdims=True)
    norms = np.linalg.norm(out, axis=-2, keepdims=True)
    out = np.where(norms > 0.0, out / np.where(norms > 0.0, norms, 1.0), 0.0)
    return out


def estoi(clean: AudioBuffer, deg: AudioBuffer) -> MeasureScore:
    """Extended STOI: joint spectro-temporal correlation, no clipping stage.

    Each 30-frame band-energy segment is row- then column-normalized; the
    segment score is the mean inner product of corresponding columns, and
    the final score averages over segments.
    """
    xs, ys = _band_segments(clean, deg)
    xn = _row_col_normalize(xs)
    yn = _row_col_normalize(ys)
    per_segment = np.sum(xn * yn, axis=(1, 2)) / SEGMENT_FRAMES
    return MeasureScore("estoi", float(per_segment.mean()))


def ncm_band_edges() -> np.ndarray:
    """Contiguous log-spaced band edges, NCM_LO_HZ to NCM_HI_HZ."""
    return np.geomspace(NCM_LO_HZ, NCM_HI_HZ, NCM_NUM_BANDS + 1)


def ncm(clean: AudioBuffer, deg: AudioBuffer) -> MeasureScore:
    """Normalized covariance metric from band-envelope correlations.

    Per band, the clean/degraded envelope correlation r is mapped to an
    apparent SNR 10*log10(r^2/(1-r^2)) clamped to [-15, 15] dB, then to a
    transmission index (SNR+15)/30; the score is the uniform-weight mean.
    """
    x, y = _to_operating_rate(clean, deg)
    edges = ncm_band_edges()
    tis = np.empty(NCM_NUM_BANDS)
    for i in range(NCM_NUM_BANDS):
        env_x = band_envelope(x, edges[i], edges[i + 1], NCM_ENV_RATE_HZ)
        env_y = band_envelope(y, edges[i], edges[i + 1], NCM_ENV_RATE_HZ)
        if env_x.size < 2:
            raise ValueError("too short: envelope has fewer than 2 samples")
        r = float(_rowwise_correlation(env_x[None, :], env_y[None, :])[0])
        r2 = min(r * r, 1.0)
        if r2 >= 1.0:
            snr_db = NCM_SNR_CEIL_DB
        elif r2 <= 0.0:
            snr_db = NCM_SNR_FLOOR_DB
        else:
            snr_db = float(
                np.clip(10.0 * np.log10(r2 / (1.0 - r2)), NCM_SNR_FLOOR_DB, NCM_SNR_CEIL_DB)
            )
        tis[i] = (snr_db - NCM_SNR_FLOOR_DB) / (NCM_SNR_CEIL_DB - NCM_SNR_FLOOR_DB)
    return MeasureScore("ncm", float(tis.mean()))
