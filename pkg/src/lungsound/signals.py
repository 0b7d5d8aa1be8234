"""Waveform-level preprocessing: resampling, low-pass filtering, segmentation,
amplitude normalization, and PCM file I/O.

All operations are pure: they return new AudioRecording objects and never
mutate their inputs, so they are safe to call from any number of workers.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import InvalidCutoff, InvalidInput

DEVICE_DOMAINS = frozenset({"stethoscope", "smartphone"})
SITES = frozenset({"RUL", "LUL", "RLL", "LLL", "unknown"})
# The four clinical classes, the collapsed binary label (as produced by the
# assessment exporter), and the unlabeled placeholder.
RAW_LABELS = frozenset({"normal", "crackle", "wheeze", "both", "abnormal", "unlabeled"})

# Canonical representation every clip is mapped onto before feature extraction:
# the stethoscope rate, with content band-limited below the common Nyquist.
CANONICAL_RATE_HZ = 4000
DEFAULT_LOWPASS_HZ = 1800.0
DEFAULT_FILTER_ORDER = 4
DEFAULT_RESAMPLE_TAPS = 64
DEFAULT_WINDOW_S = 3.0
DEFAULT_HOP_S = 3.0


@dataclass(frozen=True)
class AudioRecording:
    """A single-channel waveform plus its provenance metadata.

    samples are float64 in [-1, 1] (enforced only after normalization;
    raw synthesizer output may exceed unity before normalize_amplitude).
    """

    samples: np.ndarray
    sample_rate_hz: int
    device_domain: str = "smartphone"
    site: str = "unknown"
    raw_label: str = "unlabeled"
    patient_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidInput("recording must be a non-empty 1-D waveform")
        if not np.all(np.isfinite(samples)):
            raise InvalidInput("recording contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise InvalidInput(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.device_domain not in DEVICE_DOMAINS:
            raise InvalidInput(f"unknown device domain {self.device_domain!r}")
        if self.site not in SITES:
            raise InvalidInput(f"unknown site {self.site!r}")
        if self.raw_label not in RAW_LABELS:
            raise InvalidInput(f"unknown raw label {self.raw_label!r}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def _sinc_kernel(up: int, down: int, taps: int) -> np.ndarray:
    """Windowed-sinc low-pass for polyphase resampling at rate up/down.

    `taps` sets kernel support per input sample (quality knob); the cutoff
    sits at the tighter of the two Nyquist bands.
    """
    max_rate = max(up, down)
    half = max(1, taps // 2) * max_rate
    return sps.firwin(2 * half + 1, 1.0 / max_rate, window=("kaiser", 8.6))


def resample(rec: AudioRecording, target_rate_hz: int, taps: int = DEFAULT_RESAMPLE_TAPS) -> AudioRecording:
    """Resample a recording to target_rate_hz with a windowed-sinc polyphase filter.

    Anti-aliasing is built into the kernel, so downsampling is safe. The
    identity case returns the input samples bit-for-bit.

    Args:
        rec: input recording (non-empty, finite).
        target_rate_hz: desired output rate.
        taps: kernel quality (zero-crossings of the sinc per input sample).

    Returns:
        New AudioRecording at target_rate_hz, duration preserved to within
        one sample period.
    """
    if target_rate_hz <= 0:
        raise InvalidInput(f"target rate must be positive, got {target_rate_hz}")
    if target_rate_hz == rec.sample_rate_hz:
        return replace(rec, samples=rec.samples.copy())
    g = math.gcd(int(target_rate_hz), int(rec.sample_rate_hz))
    up, down = target_rate_hz // g, rec.sample_rate_hz // g
    kernel = _sinc_kernel(up, down, taps)
    out = sps.resample_poly(rec.samples, up, down, window=kernel, padtype="line")
    return replace(rec, samples=out, sample_rate_hz=int(target_rate_hz))


def lowpass_filter(rec: AudioRecording, cutoff_hz: float = DEFAULT_LOWPASS_HZ,
                   order: int = DEFAULT_FILTER_ORDER) -> AudioRecording:
    """Zero-phase recursive low-pass (Butterworth run forward and backward).

    Forward-backward application doubles the effective order and cancels
    group delay, so transients are not shifted in time.

    Args:
        rec: input recording.
        cutoff_hz: -3 dB point, must lie strictly inside (0, Nyquist).
        order: order of the underlying one-way filter.

    Returns:
        Filtered recording, same length and rate.
    """
    nyquist = rec.sample_rate_hz / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise InvalidCutoff(f"cutoff {cutoff_hz} Hz not in (0, {nyquist}) Hz")
    sos = sps.butter(order, cutoff_hz, btype="lowpass", fs=rec.sample_rate_hz, output="sos")
    out = sps.sosfiltfilt(sos, rec.samples)
    return replace(rec, samples=out)


def segment(rec: AudioRecording, window_s: float = DEFAULT_WINDOW_S,
            hop_s: float = DEFAULT_HOP_S) -> list[AudioRecording]:
    """Cut a recording into fixed-length clips.

    Clips inherit all metadata. A window longer than the recording yields an
    empty list rather than an error.

    Args:
        rec: input recording.
        window_s: clip length in seconds (> 0).
        hop_s: stride between clip starts in seconds (> 0).

    Returns:
        floor((duration - window) / hop) + 1 clips, possibly empty.
    """
    if window_s <= 0 or hop_s <= 0:
        raise InvalidInput("window and hop must be positive")
    win = int(round(window_s * rec.sample_rate_hz))
    hop = int(round(hop_s * rec.sample_rate_hz))
    n = len(rec.samples)
    if win > n:
        return []
    count = (n - win) // hop + 1
    return [replace(rec, samples=rec.samples[i * hop:i * hop + win].copy())
            for i in range(count)]


def normalize_amplitude(rec: AudioRecording) -> AudioRecording:
    """Scale so the peak |sample| is 1; all-zero input passes through unchanged."""
    peak = np.abs(rec.samples).max()
    if peak == 0.0:
        return replace(rec, samples=rec.samples.copy())
    return replace(rec, samples=rec.samples / peak)


def preprocess(rec: AudioRecording, cutoff_hz: float = DEFAULT_LOWPASS_HZ,
               target_rate_hz: int = CANONICAL_RATE_HZ) -> AudioRecording:
    """Canonical pipeline: low-pass at the native rate, resample, normalize.

    Filtering before the rate change keeps anti-aliasing honest for
    smartphone input; stethoscope input at the canonical rate passes through
    the same path with resample a no-op.
    """
    filtered = lowpass_filter(rec, cutoff_hz)
    resampled = resample(filtered, target_rate_hz)
    return normalize_amplitude(resampled)


def decode_wav(data: bytes) -> tuple[np.ndarray, int]:
    """Decode PCM WAV bytes (16-bit int or 32-bit float) to mono float64.

    Multi-channel input is mixed down by arithmetic mean.

    Returns:
        (samples in [-1, 1], sample_rate_hz)
    """
    try:
        rate, raw = wavfile.read(io.BytesIO(data))
    except Exception as exc:
        raise InvalidInput(f"could not decode WAV data: {exc}") from exc
    if raw.dtype == np.int16:
        samples = raw.astype(np.float64) / 32768.0
    elif raw.dtype == np.int32:
        samples = raw.astype(np.float64) / 2147483648.0
    elif raw.dtype in (np.float32, np.float64):
        samples = raw.astype(np.float64)
    else:
        raise InvalidInput(f"unsupported PCM sample format {raw.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return samples, int(rate)


def load_wav(path, **metadata) -> AudioRecording:
    """Read a PCM WAV file into an AudioRecording; metadata kwargs pass through."""
    with open(path, "rb") as fh:
        samples, rate = decode_wav(fh.read())
    return AudioRecording(samples=samples, sample_rate_hz=rate, **metadata)


def save_wav(path, rec: AudioRecording) -> None:
    """Write a recording as 16-bit PCM WAV.

    The scale matches decode_wav (full scale = 32768) so a save/load round
    trip errs by at most half a quantization step, except at exactly +1.0
    which clips to the largest representable code.
    """
    pcm = np.clip(np.round(rec.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, rec.sample_rate_hz, pcm)
