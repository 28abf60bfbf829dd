"""Objective speech measures and their fusion into subjective-score predictors."""

from .external_scores import MEASURE_NAMES, MeasureVector
from .measures import MeasureScore, estoi, ncm, stoi
from .signal_core import AudioBuffer, read_wav, resample

__all__ = [
    "AudioBuffer",
    "MEASURE_NAMES",
    "MeasureScore",
    "MeasureVector",
    "estoi",
    "ncm",
    "read_wav",
    "resample",
    "stoi",
]
