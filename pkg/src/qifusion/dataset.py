"""Manifest loading, dataset splits, and the synthetic-data generator.

The synthetic generator draws correlated twelve-measure vectors from a
fixed factor model and produces subjective-style quality/intelligibility
targets as noisy sigmoid-of-linear functions of the (normalized) measures,
with a latent component shared between the two targets that the measures
do not capture. That shared latent is what makes the quality-augmented
intelligibility predictor strictly more informed than the measures-only
one, mirroring the structure of real listening-test data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .external_scores import (
    MEASURE_NAMES,
    NOMINAL_RANGES,
    MeasureVector,
    validate_measure,
)
from .signal_core import AudioBuffer, write_wav_pcm16

@dataclass
class UtteranceRecord:
    utt_id: str
    subj_quality: float
    subj_intelligibility: float
    speaker_id: str | None = None
    clean_path: str | None = None
    degraded_path: str | None = None
    measures: MeasureVector = field(default_factory=MeasureVector)

    def __post_init__(self):
        if not 1.0 <= self.subj_quality <= 5.0:
            raise ValueError(
                f"{self.utt_id}: subj_quality {self.subj_quality} outside [1, 5]"
            )
        if not 0.0 <= self.subj_intelligibility <= 10.0:
            raise ValueError(
                f"{self.utt_id}: subj_intelligibility "
                f"{self.subj_intelligibility} outside [0, 10]"
            )


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation split: random by rows or disjoint by speaker."""

    mode: str = "random_fraction"
    validation_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random_fraction", "speaker_disjoint"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")


_REQUIRED_COLUMNS = ("utt_id", "subj_quality", "subj_intelligibility")
_OPTIONAL_COLUMNS = ("speaker_id", "clean_path", "degraded_path") + MEASURE_NAMES


def load_manifest(path) -> list[UtteranceRecord]:
    """Load utterance records from a manifest CSV.

    Required columns: utt_id, subj_quality, subj_intelligibility. Optional:
    speaker_id, clean_path, degraded_path and the twelve measure columns.
    """
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        names = reader.fieldnames or []
        missing = [c for c in _REQUIRED_COLUMNS if c not in names]
        if missing:
            raise ValueError(f"manifest missing required columns {missing}: {path}")
        for line_no, row in enumerate(reader, start=2):
            utt_id = row["utt_id"]
            if utt_id in seen:
                raise ValueError(f"duplicate utt_id {utt_id!r} at line {line_no}")
            seen.add(utt_id)
            try:
                quality = float(row["subj_quality"])
                intel = float(row["subj_intelligibility"])
            except ValueError:
                raise ValueError(f"unparsable subjective score at line {line_no}") from None
            values: dict[str, float] = {}
            for name in MEASURE_NAMES:
                cell = row.get(name)
                if cell is None or cell.strip() == "":
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(
                        f"unparsable {name} value {cell!r} at line {line_no}"
                    ) from None
                v, _ = validate_measure(name, v)
                values[name] = v

            def _opt(col: str) -> str | None:
                cell = row.get(col)
                return cell if cell else None

            records.append(
                UtteranceRecord(
                    utt_id=utt_id,
                    subj_quality=quality,
                    subj_intelligibility=intel,
                    speaker_id=_opt("speaker_id"),
                    clean_path=_opt("clean_path"),
                    degraded_path=_opt("degraded_path"),
                    measures=MeasureVector(**values),
                )
            )
    return records


def write_manifest(records, path) -> None:
    """Write records in the manifest CSV format (deterministic order given)."""
    columns = list(_REQUIRED_COLUMNS) + list(_OPTIONAL_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for rec in records:
            row = [
                rec.utt_id,
                repr(float(rec.subj_quality)),
                repr(float(rec.subj_intelligibility)),
                rec.speaker_id or "",
                rec.clean_path or "",
                rec.degraded_path or "",
            ]
            for name in MEASURE_NAMES:
                v = getattr(rec.measures, name)
                row.append("" if v is None else repr(float(v)))
            writer.writerow(row)


def split(records, spec: SplitSpec):
    """Split records into (train, validation) per the spec."""
    records = list(records)
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "random_fraction":
        order = rng.permutation(len(records))
        n_val = int(round(spec.validation_fraction * len(records)))
        val_idx = set(order[:n_val].tolist())
        train = [r for i, r in enumerate(records) if i not in val_idx]
        val = [r for i, r in enumerate(records) if i in val_idx]
        return train, val
    # speaker_disjoint: shuffle speakers, fill validation greedily
    if any(r.speaker_id is None for r in records):
        raise ValueError("speaker_disjoint split requires speaker_id on all records")
    speakers = sorted({r.speaker_id for r in records})
    if len(speakers) < 2:
        raise ValueError("speaker_disjoint split requires at least 2 speakers")
    rng.shuffle(speakers)
    target = spec.validation_fraction * len(records)
    val_speakers: set[str] = set()
    count = 0
    for s in speakers:
        if count >= target:
            break
        val_speakers.add(s)
        count += sum(1 for r in records if r.speaker_id == s)
    train = [r for r in records if r.speaker_id not in val_speakers]
    val = [r for r in records if r.speaker_id in val_speakers]
    if not train:
        raise ValueError("speaker_disjoint split left no training speakers")
    return train, val


def subsample(records, fraction: float, seed: int, nested: bool = False):
    """Seeded uniform sample without replacement of round(fraction*n) records.

    By default different fractions draw independently; with ``nested=True``
    smaller fractions are prefixes of larger ones (one shared permutation).
    """
    records = list(records)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(records)
    k = int(round(fraction * n))
    if k < 1:
        raise ValueError("subsample would be empty")
    if nested:
        order = np.random.default_rng(seed).permutation(n)[:k]
    else:
        # derive an independent stream per fraction so draws are uncorrelated
        seq = np.random.SeedSequence([seed, int(round(fraction * 1_000_000))])
        order = np.random.default_rng(seq).permutation(n)[:k]
    idx = np.sort(order)
    return [records[i] for i in idx]


@dataclass
class FeatureSet:
    """Dense model inputs/targets assembled from records with complete vectors."""

    x: np.ndarray
    quality: np.ndarray
    intelligibility: np.ndarray
    utt_ids: list[str]
    n_excluded: int
    n_imputed: int
    feature_means: np.ndarray | None = None


def assemble_features(records, impute: str | None = None, train_means=None) -> FeatureSet:
    """Build the [n x 12] feature matrix and target vectors.

    Records missing any measure are excluded unless ``impute='train_mean'``,
    which substitutes the per-feature mean (of these records, or of
    ``train_means`` when given, so test-time imputation uses training
    statistics).
    """
    if impute not in (None, "train_mean"):
        raise ValueError(f"unknown impute mode {impute!r}")
    records = list(records)
    rows = []
    for rec in records:
        rows.append([getattr(rec.measures, n) for n in MEASURE_NAMES])
    raw = np.array(
        [[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64
    )
    present = ~np.isnan(raw)
    n_imputed = 0
    if impute == "train_mean":
        if train_means is None:
            with np.errstate(invalid="ignore"):
                train_means = np.nanmean(raw, axis=0)
        train_means = np.asarray(train_means, dtype=np.float64)
        if np.any(np.isnan(train_means)):
            missing = [n for n, m in zip(MEASURE_NAMES, train_means) if np.isnan(m)]
            raise ValueError(f"cannot impute features with no observed values: {missing}")
        n_imputed = int((~present).sum())
        raw = np.where(present, raw, train_means)
        keep = np.ones(len(records), dtype=bool)
    else:
        keep = present.all(axis=1)
    kept = [rec for rec, k in zip(records, keep) if k]
    return FeatureSet(
        x=raw[keep],
        quality=np.array([r.subj_quality for r in kept]),
        intelligibility=np.array([r.subj_intelligibility for r in kept]),
        utt_ids=[r.utt_id for r in kept],
        n_excluded=int((~keep).sum()),
        n_imputed=n_imputed,
        feature_means=train_means if impute == "train_mean" else None,
    )


# --- Synthetic generator ----------------------------------------------------

# Generation ranges: nominal loader ranges plus unit intervals for the
# natively computed measures.
GENERATOR_RANGES = dict(NOMINAL_RANGES)
GENERATOR_RANGES.update({"ncm": (0.0, 1.0), "stoi": (0.0, 1.0), "estoi": (0.0, 1.0)})

# Factor model: measure_k = mid + std * (loading * d + sqrt(1-loading^2) * e_k)
# where d is a per-utterance degradation-severity factor. WER loads
# negatively (more degradation, more errors). Values below are calibrated
# so the default dataset reproduces a quality/intelligibility correlation
# near 0.68 while both targets remain nearly realizable from the measures.
_MEASURE_MID = {
    "pesq": 2.0,
    "p835_sig": 3.3,
    "p835_bak": 3.0,
    "p835_ovrl": 3.1,
    "dnsmos_sig": 3.2,
    "dnsmos_bak": 3.1,
    "dnsmos_ovrl": 3.0,
    "mosanet": 3.0,
    "ncm": 0.60,
    "stoi": 0.72,
    "estoi": 0.58,
    "wer": 0.35,
}
_MEASURE_STD = {
    "pesq": 0.80,
    "p835_sig": 0.60,
    "p835_bak": 0.70,
    "p835_ovrl": 0.60,
    "dnsmos_sig": 0.50,
    "dnsmos_bak": 0.60,
    "dnsmos_ovrl": 0.50,
    "mosanet": 0.60,
    "ncm": 0.15,
    "stoi": 0.11,
    "estoi": 0.15,
    "wer": 0.18,
}
_FACTOR_LOADING = {
    "pesq": 0.42,
    "p835_sig": 0.38,
    "p835_bak": 0.33,
    "p835_ovrl": 0.40,
    "dnsmos_sig": 0.30,
    "dnsmos_bak": 0.27,
    "dnsmos_ovrl": 0.33,
    "mosanet": 0.36,
    "ncm": 0.38,
    "stoi": 0.40,
    "estoi": 0.42,
    "wer": -0.38,
}

# Target weights act on the range-normalized measures centered at 0.5.
_W_QUALITY = {
    "pesq": 1.70,
    "p835_sig": 1.25,
    "p835_bak": 1.00,
    "p835_ovrl": 1.40,
    "dnsmos_sig": 0.85,
    "dnsmos_bak": 0.70,
    "dnsmos_ovrl": 1.00,
    "mosanet": 1.15,
    "ncm": 0.40,
    "stoi": 0.30,
    "estoi": 0.30,
    "wer": -0.45,
}
_W_INTELLIGIBILITY = {
    "pesq": 0.50,
    "p835_sig": 0.25,
    "p835_bak": 0.25,
    "p835_ovrl": 0.40,
    "dnsmos_sig": 0.25,
    "dnsmos_bak": 0.15,
    "dnsmos_ovrl": 0.25,
    "mosanet": 0.40,
    "ncm": 2.30,
    "stoi": 2.00,
    "estoi": 2.30,
    "wer": -3.50,
}
_BIAS_QUALITY = 0.0
_BIAS_INTELLIGIBILITY = 0.85
# Pre-sigmoid gain of the shared latent per unit shared_latent_weight.
_LATENT_GAIN_QUALITY = 0.11
_LATENT_GAIN_INTELLIGIBILITY = 0.13


@dataclass(frozen=True)
class SynthConfig:
    n: int = 2000
    seed: int = 0
    noise_std_q: float = 0.10
    noise_std_i: float = 0.18
    shared_latent_weight: float = 1.0

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("n must be >= 100")
        if self.noise_std_q < 0 or self.noise_std_i < 0:
            raise ValueError("noise stds must be nonnegative")


@dataclass
class SynthStats:
    """Clipping rates reported by the generator."""

    measure_clip_rate: float
    quality_clip_rate: float
    intelligibility_clip_rate: float


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def speechlike_waveform(
    seed: int, duration_s: float = 2.0, sample_rate_hz: int = 10000, n_tones: int = 16
) -> AudioBuffer:
    """Deterministic speech-like test signal: AM tone complex plus a noise floor.

    Tones are spread across 180-4200 Hz with independent slow (2-8 Hz)
    amplitude modulation, and a low-level broadband noise floor guarantees
    nonzero, time-varying energy in every analysis band.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    sig = np.zeros(n)
    freqs = np.exp(rng.uniform(np.log(180.0), np.log(4200.0), size=n_tones))
    for f in freqs:
        rate = rng.uniform(2.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        env = 0.3 + 0.7 * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + phase))
        sig += env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    sig += 0.08 * np.sqrt(n_tones) * rng.standard_normal(n)
    sig *= 0.7 / np.max(np.abs(sig))
    return AudioBuffer(samples=sig, sample_rate_hz=sample_rate_hz)


def _degraded_pair(rng, quality: float, sample_rate_hz: int = 16000):
    """Clean/degraded WAV pair whose SNR tracks the quality score."""
    clean = speechlike_waveform(
        int(rng.integers(0, 2**31)), duration_s=1.2, sample_rate_hz=sample_rate_hz
    )
    snr_db = -5.0 + 7.5 * (quality - 1.0)
    noise = rng.standard_normal(clean.samples.size)
    noise *= np.linalg.norm(clean.samples) / np.linalg.norm(noise) * 10 ** (-snr_db / 20.0)
    deg = clean.samples + noise
    peak = max(np.max(np.abs(deg)), 1.0)
    return clean, AudioBuffer(samples=deg / peak, sample_rate_hz=sample_rate_hz)


def synth_generate(config: SynthConfig, wav_dir=None):
    """Generate synthetic utterance records (and optional WAV pairs).

    Returns (records, SynthStats). With ``wav_dir`` set, a clean/degraded
    16 kHz PCM16 pair is written per record and referenced from the
    record paths so the native-measure pipeline can run end to end.
    """
    if wav_dir is not None:
        wav_dir = Path(wav_dir)
        wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    n = config.n
    d = rng.standard_normal(n)  # degradation-severity factor
    shared = rng.standard_normal(n)  # latent shared by the two targets only
    eps = rng.standard_normal((n, len(MEASURE_NAMES)))
    noise_q = rng.standard_normal(n) * config.noise_std_q
    noise_i = rng.standard_normal(n) * config.noise_std_i

    raw = np.empty((n, len(MEASURE_NAMES)))
    normalized = np.empty_like(raw)
    clipped = 0
    for k, name in enumerate(MEASURE_NAMES):
        load = _FACTOR_LOADING[name]
        col = _MEASURE_MID[name] + _MEASURE_STD[name] * (
            load * d + math.sqrt(1.0 - load * load) * eps[:, k]
        )
        lo, hi = GENERATOR_RANGES[name]
        col_clipped = np.clip(col, lo, hi)
        clipped += int(np.sum(col_clipped != col))
        raw[:, k] = col_clipped
        normalized[:, k] = (col_clipped - lo) / (hi - lo)

    w_q = np.array([_W_QUALITY[name] for name in MEASURE_NAMES])
    w_i = np.array([_W_INTELLIGIBILITY[name] for name in MEASURE_NAMES])
    slw = config.shared_latent_weight
    q_lin = (normalized - 0.5) @ w_q + _BIAS_QUALITY + slw * _LATENT_GAIN_QUALITY * shared
    i_lin = (
        (normalized - 0.5) @ w_i
        + _BIAS_INTELLIGIBILITY
        + slw * _LATENT_GAIN_INTELLIGIBILITY * shared
    )
    quality = 1.0 + 4.0 * _sigmoid(q_lin) + noise_q
    intel = 10.0 * _sigmoid(i_lin) + noise_i
    quality_clipped = np.clip(quality, 1.0, 5.0)
    intel_clipped = np.clip(intel, 0.0, 10.0)
    stats = SynthStats(
        measure_clip_rate=clipped / raw.size,
        quality_clip_rate=float(np.mean(quality_clipped != quality)),
        intelligibility_clip_rate=float(np.mean(intel_clipped != intel)),
    )

    speakers = rng.integers(0, 24, size=n)
    records = []
    for i in range(n):
        utt_id = f"synth_{i:06d}"
        clean_path = degraded_path = None
        if wav_dir is not None:
            clean, deg = _degraded_pair(rng, float(quality_clipped[i]))
            clean_path = str(wav_dir / f"{utt_id}_clean.wav")
            degraded_path = str(wav_dir / f"{utt_id}_degraded.wav")
            write_wav_pcm16(clean_path, clean)
            write_wav_pcm16(degraded_path, deg)
        records.append(
            UtteranceRecord(
                utt_id=utt_id,
                subj_quality=float(quality_clipped[i]),
                subj_intelligibility=float(intel_clipped[i]),
                speaker_id=f"spk{speakers[i]:02d}",
                clean_path=clean_path,
                degraded_path=degraded_path,
                measures=MeasureVector(
                    **{name: float(raw[i, k]) for k, name in enumerate(MEASURE_NAMES)}
                ),
            )
        )
    return records, stats
