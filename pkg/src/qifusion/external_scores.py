"""Ingestion of precomputed objective scores and measure-vector assembly.

PESQ, P.835, DNSMOS and MOSA-Net scores (and WER) come from third-party
tools; this module only loads them from CSV and merges them with natively
computed NCM/STOI/ESTOI values into complete twelve-dimensional vectors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields, replace

import numpy as np

# Canonical measure order; also the feature order of the fusion model input.
MEASURE_NAMES = (
    "pesq",
    "p835_sig",
    "p835_bak",
    "p835_ovrl",
    "dnsmos_sig",
    "dnsmos_bak",
    "dnsmos_ovrl",
    "mosanet",
    "ncm",
    "stoi",
    "estoi",
    "wer",
)

# Nominal ranges enforced at load time (with slack); ncm/stoi/estoi are
# stored raw and unbounded since providers may return values outside the
# theoretical range.
NOMINAL_RANGES = {
    "pesq": (-0.5, 4.5),
    "p835_sig": (1.0, 5.0),
    "p835_bak": (1.0, 5.0),
    "p835_ovrl": (1.0, 5.0),
    "dnsmos_sig": (1.0, 5.0),
    "dnsmos_bak": (1.0, 5.0),
    "dnsmos_ovrl": (1.0, 5.0),
    "mosanet": (1.0, 5.0),
    "wer": (0.0, 1.0),
}

RANGE_SLACK = 0.25


@dataclass(frozen=True)
class MeasureVector:
    """The twelve named objective scores for one utterance, possibly partial."""

    pesq: float | None = None
    p835_sig: float | None = None
    p835_bak: float | None = None
    p835_ovrl: float | None = None
    dnsmos_sig: float | None = None
    dnsmos_bak: float | None = None
    dnsmos_ovrl: float | None = None
    mosanet: float | None = None
    ncm: float | None = None
    stoi: float | None = None
    estoi: float | None = None
    wer: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"non-finite value for {f.name}")

    @property
    def complete(self) -> bool:
        return all(getattr(self, name) is not None for name in MEASURE_NAMES)

    def present(self) -> dict[str, float]:
        return {
            name: getattr(self, name)
            for name in MEASURE_NAMES
            if getattr(self, name) is not None
        }

    def to_array(self) -> np.ndarray:
        if not self.complete:
            missing = [n for n in MEASURE_NAMES if getattr(self, n) is None]
            raise ValueError(f"incomplete measure vector, missing: {missing}")
        return np.array([getattr(self, n) for n in MEASURE_NAMES], dtype=np.float64)


def validate_measure(name: str, value: float) -> tuple[float, str | None]:
    """Range-check one measure value; returns (value, warning-or-None).

    Values outside the nominal range by more than RANGE_SLACK are a load
    error. WER is special-cased: ASR insertions can push it past 1, so
    values within slack are clamped back into [0, 1] with a warning.
    """
    if not np.isfinite(value):
        raise ValueError(f"non-finite value for {name}")
    bounds = NOMINAL_RANGES.get(name)
    if bounds is None:
        return float(value), None
    lo, hi = bounds
    if value < lo - RANGE_SLACK or value > hi + RANGE_SLACK:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}] by more than {RANGE_SLACK}")
    if name == "wer" and not lo <= value <= hi:
        clamped = min(max(value, lo), hi)
        return clamped, f"wer={value} clamped to {clamped}"
    return float(value), None


@dataclass
class LoadedScores:
    """Result of loading a score CSV: per-utterance partial vectors plus warnings."""

    scores: dict[str, MeasureVector]
    warnings: list[str]


def load_external_scores(path) -> LoadedScores:
    """Load a CSV of precomputed scores keyed by utt_id.

    The header must contain ``utt_id``; any subset of the twelve canonical
    measure columns is accepted. Unknown columns are ignored with a
    warning record; duplicate ids, unparsable cells and out-of-range values
    are errors.
    """
    warnings: list[str] = []
    scores: dict[str, MeasureVector] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "utt_id" not in reader.fieldnames:
            raise ValueError(f"missing utt_id column: {path}")
        unknown = [c for c in reader.fieldnames if c != "utt_id" and c not in MEASURE_NAMES]
        for col in unknown:
            warnings.append(f"ignoring unknown column {col!r}")
        for line_no, row in enumerate(reader, start=2):
            utt_id = row["utt_id"]
            if utt_id in scores:
                raise ValueError(f"duplicate utt_id {utt_id!r} at line {line_no}")
            values: dict[str, float] = {}
            for name in MEASURE_NAMES:
                cell = row.get(name)
                if cell is None or cell.strip() == "":
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(
                        f"unparsable {name} value {cell!r} for {utt_id!r} at line {line_no}"
                    ) from None
                value, warning = validate_measure(name, value)
                if warning:
                    warnings.append(f"{utt_id}: {warning}")
                values[name] = value
            scores[utt_id] = MeasureVector(**values)
    return LoadedScores(scores=scores, warnings=warnings)


def write_scores_csv(scores: dict[str, MeasureVector], path, columns=None) -> None:
    """Write scores as CSV, one row per utt_id (sorted), blank for missing."""
    columns = list(columns) if columns is not None else list(MEASURE_NAMES)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["utt_id"] + columns)
        for utt_id in sorted(scores):
            vec = scores[utt_id]
            row = [utt_id]
            for name in columns:
                v = getattr(vec, name)
                row.append("" if v is None else repr(float(v)))
            writer.writerow(row)


def merge(native: MeasureVector, external: MeasureVector, prefer_external: bool = False) -> MeasureVector:
    """Union of two partial vectors; on overlap the native value wins
    unless prefer_external is set."""
    values = dict(external.present())
    native_values = native.present()
    for name, v in native_values.items():
        if name not in values or not prefer_external:
            values[name] = v
    return MeasureVector(**values)


def apply_external_scores(records, loaded: LoadedScores, prefer_external: bool = False):
    """Merge loaded external scores into UtteranceRecords by utt_id."""
    out = []
    for rec in records:
        ext = loaded.scores.get(rec.utt_id)
        if ext is None:
            out.append(rec)
        else:
            out.append(replace(rec, measures=merge(rec.measures, ext, prefer_external)))
    return out
