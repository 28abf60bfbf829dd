"""Audio I/O and DSP primitives shared by the intrusive measures.

All operations are pure functions; buffers are safe to share read-only
across parallel workers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform with its sample rate; amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        a = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "samples", a)
        if a.size < 1:
            raise ValueError("empty audio buffer")
        if not np.all(np.isfinite(a)):
            raise ValueError("audio contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude STFT: [frames x bins] with bins = fft_len/2 + 1."""

    magnitudes: np.ndarray
    frame_len: int
    hop: int
    fft_len: int
    sample_rate_hz: int

    @property
    def bin_freqs_hz(self) -> np.ndarray:
        n_bins = self.fft_len // 2 + 1
        return np.arange(n_bins) * self.sample_rate_hz / self.fft_len


@dataclass(frozen=True)
class BandEnergies:
    """Per-frame band magnitudes: [frames x bands]."""

    energies: np.ndarray
    centers_hz: np.ndarray


def hann_window(n: int) -> np.ndarray:
    """Hann window of length n without the zero endpoints.

    Built as the interior of a symmetric Hann of length n+2, so overlap-add
    denominators stay strictly positive everywhere.
    """
    k = np.arange(1, n + 1, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n + 1)))


# --- WAV reading -----------------------------------------------------------

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3


def read_wav(path) -> AudioBuffer:
    """Read a mono PCM16 or float32 RIFF/WAVE file.

    Anything else (other encodings, multi-channel) is rejected rather than
    silently converted. PCM16 samples are scaled by 1/32768.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise ValueError(f"malformed RIFF header: {path}")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise ValueError(f"malformed fmt chunk: {path}")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise ValueError(f"missing fmt or data chunk: {path}")
    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise ValueError(f"unsupported channel count {channels} (mono only): {path}")
    if audio_format == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise ValueError(
            f"unsupported encoding (format={audio_format}, bits={bits}): {path}"
        )
    return AudioBuffer(samples=samples, sample_rate_hz=rate)


def write_wav_pcm16(path, buf: AudioBuffer) -> None:
    """Write a mono PCM16 WAV (used by the synthetic-data generator)."""
    x = np.clip(buf.samples, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    payload = pcm.tobytes()
    rate = buf.sample_rate_hz
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, _WAVE_FORMAT_PCM, 1, rate, rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as f:
        f.write(header + payload)


# --- Resampling ------------------------------------------------------------

RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 12.0


def design_resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser windowed-sinc prototype lowpass for up/down conversion.

    Odd length (64 taps/phase plus one) so the group delay at the upsampled
    rate is an integer. Gain ``up`` compensates zero stuffing.
    """
    n_taps = RESAMPLE_TAPS_PER_PHASE * up + 1
    cutoff = 1.0 / max(up, down)  # fraction of the upsampled Nyquist
    n = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(n_taps, RESAMPLE_KAISER_BETA)
    return h * up


def resample(x: AudioBuffer, target_hz: int) -> AudioBuffer:
    """Polyphase windowed-sinc rate conversion preserving duration.

    Output length is ceil(n * target/source), i.e. duration is preserved
    within one sample period.
    """
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz == x.sample_rate_hz:
        return AudioBuffer(samples=x.samples.copy(), sample_rate_hz=target_hz)
    g = math.gcd(x.sample_rate_hz, target_hz)
    up = target_hz // g
    down = x.sample_rate_hz // g
    h = design_resample_filter(up, down)
    delay = (h.size - 1) // 2
    full = sps.upfirdn(h, x.samples, up=up, down=1)
    n_out = -(-x.samples.size * up // down)
    idx = np.arange(n_out) * down + delay
    return AudioBuffer(samples=full[idx], sample_rate_hz=target_hz)


# --- Short-time analysis ---------------------------------------------------


def _frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n_frames = (samples.size - frame_len) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop]
    return frames[:n_frames]


def stft(x: AudioBuffer, frame_len: int, hop: int, fft_len: int) -> Spectrogram:
    """Magnitude STFT with a Hann window and zero padding to fft_len."""
    if frame_len > fft_len:
        raise ValueError("frame_len must not exceed fft_len")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if x.samples.size < frame_len:
        raise ValueError("signal shorter than one frame")
    frames = _frame_signal(x.samples, frame_len, hop) * hann_window(frame_len)
    mags = np.abs(np.fft.rfft(frames, n=fft_len, axis=1))
    return Spectrogram(
        magnitudes=mags,
        frame_len=frame_len,
        hop=hop,
        fft_len=fft_len,
        sample_rate_hz=x.sample_rate_hz,
    )


def third_octave_centers(num_bands: int, cf_min: float) -> np.ndarray:
    return cf_min * np.power(2.0, np.arange(num_bands) / 3.0)


def third_octave_bands(
    spec: Spectrogram, num_bands: int = 15, cf_min: float = 150.0
) -> BandEnergies:
    """One-third-octave band magnitudes from an STFT.

    Band j is centered at cf_min * 2^(j/3) with edges at center * 2^(±1/6);
    a band reaching past Nyquist is truncated there, not dropped. The band
    value is the l2 norm of the member bin magnitudes per frame.
    """
    nyquist = spec.sample_rate_hz / 2.0
    if cf_min >= nyquist:
        raise ValueError("cf_min must be below Nyquist")
    centers = third_octave_centers(num_bands, cf_min)
    lo = centers * 2.0 ** (-1.0 / 6.0)
    hi = centers * 2.0 ** (1.0 / 6.0)
    f = spec.bin_freqs_hz
    power = np.square(spec.magnitudes)
    out = np.zeros((spec.magnitudes.shape[0], num_bands))
    for j in range(num_bands):
        in_band = (f >= lo[j]) & (f < hi[j])
        if hi[j] > nyquist:
            in_band |= f == nyquist  # truncate at Nyquist, keeping the top bin
        out[:, j] = np.sqrt(power[:, in_band].sum(axis=1))
    return BandEnergies(energies=out, centers_hz=centers)


def remove_silent_frames(
    clean: AudioBuffer,
    deg: AudioBuffer,
    dyn_range_db: float = 40.0,
    frame_len: int = 256,
    hop: int = 128,
) -> tuple[AudioBuffer, AudioBuffer]:
    """Drop frames that are silent in the clean signal from both signals.

    A frame is silent when its Hann-windowed energy falls more than
    dyn_range_db below the loudest clean frame. Kept frames are stitched
    back by overlap-add, normalized by the overlapped window sum so an
    input with no silent frames reconstructs exactly. ``dyn_range_db=inf``
    disables the criterion and keeps every frame.
    """
    if clean.samples.size != deg.samples.size:
        raise ValueError("clean/degraded length mismatch")
    if clean.sample_rate_hz != deg.sample_rate_hz:
        raise ValueError("clean/degraded sample rate mismatch")
    if clean.samples.size < frame_len:
        raise ValueError("signal shorter than one frame")
    w = hann_window(frame_len)
    x_frames = _frame_signal(clean.samples, frame_len, hop) * w
    y_frames = _frame_signal(deg.samples, frame_len, hop) * w
    energies = np.sum(np.square(x_frames), axis=1)
    max_energy = energies.max()
    if max_energy <= 0.0:
        raise ValueError("degenerate input: clean signal entirely silent")
    if math.isinf(dyn_range_db):
        mask = np.ones(energies.size, dtype=bool)
    else:
        threshold_db = 10.0 * np.log10(max_energy) - dyn_range_db
        with np.errstate(divide="ignore"):
            mask = 10.0 * np.log10(energies) > threshold_db
    if not mask.any():
        raise ValueError("degenerate input: no frame survives silence removal")
    x_kept = x_frames[mask]
    y_kept = y_frames[mask]
    n_out = (x_kept.shape[0] - 1) * hop + frame_len
    x_out = np.zeros(n_out)
    y_out = np.zeros(n_out)
    w_sum = np.zeros(n_out)
    for i in range(x_kept.shape[0]):
        sl = slice(i * hop, i * hop + frame_len)
        x_out[sl] += x_kept[i]
        y_out[sl] += y_kept[i]
        w_sum[sl] += w
    x_out /= w_sum
    y_out /= w_sum
    rate = clean.sample_rate_hz
    return (
        AudioBuffer(samples=x_out, sample_rate_hz=rate),
        AudioBuffer(samples=y_out, sample_rate_hz=rate),
    )


# --- Band envelopes --------------------------------------------------------


def band_envelope(
    x: AudioBuffer, band_lo: float, band_hi: float, env_rate_hz: float = 25.0
) -> np.ndarray:
    """Low-rate amplitude envelope of one frequency band.

    Pipeline: 4th-order Butterworth bandpass applied forward-backward
    (zero phase), magnitude of the FFT analytic signal, then a zero-phase
    lowpass at env_rate/2 and decimation to env_rate_hz.
    """
    nyquist = x.sample_rate_hz / 2.0
    if not 0.0 < band_lo < band_hi <= nyquist:
        raise ValueError("band must satisfy 0 < lo < hi <= Nyquist")
    factor = x.sample_rate_hz / env_rate_hz
    if abs(factor - round(factor)) > 1e-9:
        raise ValueError("sample rate must be an integer multiple of env_rate_hz")
    factor = int(round(factor))
    hi = min(band_hi, nyquist * (1.0 - 1e-9))  # butter needs an open interval
    sos = sps.butter(4, [band_lo, hi], btype="bandpass", fs=x.sample_rate_hz, output="sos")
    banded = sps.sosfiltfilt(sos, x.samples)
    env = np.abs(sps.hilbert(banded))
    sos_lp = sps.butter(4, env_rate_hz / 2.0, btype="lowpass", fs=x.sample_rate_hz, output="sos")
    smooth = sps.sosfiltfilt(sos_lp, env)
    return np.maximum(smooth[::factor], 0.0)
