"""Log-mel spectrograms, patch extraction, and dataset standardization.

The front end turns canonical-rate clips into an F x T log-mel matrix and
then into a frequency-major sequence of flattened patches. Everything here
is deterministic for a fixed config.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import InvalidInput
from .signals import CANONICAL_RATE_HZ, AudioRecording


@dataclass(frozen=True)
class FeatureConfig:
    """Spectrogram and patch parameters.

    Defaults target the 4 kHz canonical rate: 64 mel bins over the full
    0-2000 Hz band, 25 ms raised-cosine window, 10 ms hop. Patches are
    16x16 with stride 10 (overlapping) along both axes.
    """

    sample_rate_hz: int = CANONICAL_RATE_HZ
    mel_bins: int = 64
    freq_low_hz: float = 0.0
    freq_high_hz: float = 2000.0
    window_s: float = 0.025
    hop_s: float = 0.010
    n_fft: int = 512
    log_floor_power: float = 1e-10
    patch_h: int = 16
    patch_w: int = 16
    stride_f: int = 10
    stride_t: int = 10

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate_hz))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_s * self.sample_rate_hz))

    @property
    def log_floor(self) -> float:
        return float(np.log(self.log_floor_power))


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel magnitude matrix, frequency on rows and time on columns."""

    values: np.ndarray  # (mel_bins, frames) float32
    freq_range_hz: tuple[float, float]
    frame_hop_s: float

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    """Flattened patches in frequency-major order.

    patches[r * cols + c] is the patch at frequency-row r, time-column c,
    itself flattened row-major (frequency-major within the patch).
    """

    patches: np.ndarray  # (N, patch_h * patch_w) float32
    grid_shape: tuple[int, int]  # (rows along frequency, cols along time)
    patch_h: int
    patch_w: int
    stride_f: int
    stride_t: int


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel filters as a (mel_bins, n_fft // 2 + 1) weight matrix."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate_hz / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.freq_low_hz), hz_to_mel(cfg.freq_high_hz),
                                  cfg.mel_bins + 2))
    bank = np.zeros((cfg.mel_bins, n_bins))
    for k in range(cfg.mel_bins):
        lo, center, hi = edges[k], edges[k + 1], edges[k + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - center, 1e-12)
        bank[k] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def filter_response_at(cfg: FeatureConfig, freq_hz: float) -> np.ndarray:
    """Each mel filter's triangle weight evaluated at one exact frequency.

    Independent of any FFT grid; used as the oracle for pure-tone placement.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.freq_low_hz), hz_to_mel(cfg.freq_high_hz),
                                  cfg.mel_bins + 2))
    out = np.zeros(cfg.mel_bins)
    for k in range(cfg.mel_bins):
        lo, center, hi = edges[k], edges[k + 1], edges[k + 2]
        rising = (freq_hz - lo) / max(center - lo, 1e-12)
        falling = (hi - freq_hz) / max(hi - center, 1e-12)
        out[k] = max(0.0, min(rising, falling))
    return out


def log_mel_spectrogram(clip: AudioRecording, cfg: FeatureConfig | None = None) -> Spectrogram:
    """Compute the log-mel spectrogram of a canonical-rate clip.

    Frames: floor((len - window) / hop) + 1, no padding, raised-cosine
    (Hann) analysis window. Power below cfg.log_floor_power is clamped so
    all outputs are >= the log floor and digital silence maps exactly to it.

    Args:
        clip: recording at cfg.sample_rate_hz.
        cfg: feature parameters (defaults used when omitted).

    Returns:
        Spectrogram with shape (mel_bins, frames).
    """
    cfg = cfg or FeatureConfig()
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise InvalidInput(
            f"clip rate {clip.sample_rate_hz} != feature rate {cfg.sample_rate_hz}; resample first")
    win, hop = cfg.window_samples, cfg.hop_samples
    x = clip.samples
    if len(x) < win:
        raise InvalidInput(f"clip of {len(x)} samples shorter than one {win}-sample window")
    frames = (len(x) - win) // hop + 1
    window = sps.get_window("hann", win, fftbins=True)
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    spectra = np.fft.rfft(x[idx] * window, n=cfg.n_fft, axis=1)
    power = np.abs(spectra) ** 2  # (frames, n_fft//2+1)
    mel_power = power @ mel_filterbank(cfg).T  # (frames, mel_bins)
    values = np.log(np.maximum(mel_power, cfg.log_floor_power)).T
    return Spectrogram(values=values.astype(np.float32),
                       freq_range_hz=(cfg.freq_low_hz, cfg.freq_high_hz),
                       frame_hop_s=cfg.hop_s)


def patch_grid_shape(f: int, t: int, cfg: FeatureConfig) -> tuple[int, int]:
    """(rows, cols) a spectrogram of shape (f, t) splits into under cfg."""
    if f < cfg.patch_h or t < cfg.patch_w:
        raise InvalidInput(f"spectrogram {f}x{t} smaller than one {cfg.patch_h}x{cfg.patch_w} patch")
    return ((f - cfg.patch_h) // cfg.stride_f + 1,
            (t - cfg.patch_w) // cfg.stride_t + 1)


def patchify(spec: Spectrogram, cfg: FeatureConfig | None = None) -> PatchGrid:
    """Slice a spectrogram into flattened patches, frequency-major.

    Args:
        spec: input spectrogram (must fit at least one patch).
        cfg: patch geometry.

    Returns:
        PatchGrid with N = rows * cols patches of patch_h * patch_w values.
    """
    cfg = cfg or FeatureConfig()
    rows, cols = patch_grid_shape(spec.mel_bins, spec.frames, cfg)
    patches = np.empty((rows * cols, cfg.patch_h * cfg.patch_w), dtype=np.float32)
    for r in range(rows):
        for c in range(cols):
            block = spec.values[r * cfg.stride_f:r * cfg.stride_f + cfg.patch_h,
                                c * cfg.stride_t:c * cfg.stride_t + cfg.patch_w]
            patches[r * cols + c] = block.reshape(-1)
    return PatchGrid(patches=patches, grid_shape=(rows, cols),
                     patch_h=cfg.patch_h, patch_w=cfg.patch_w,
                     stride_f=cfg.stride_f, stride_t=cfg.stride_t)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Reassemble a non-overlapping grid (stride == patch size) into a matrix."""
    if grid.stride_f != grid.patch_h or grid.stride_t != grid.patch_w:
        raise InvalidInput("unpatchify requires stride equal to patch size")
    rows, cols = grid.grid_shape
    out = np.empty((rows * grid.patch_h, cols * grid.patch_w), dtype=grid.patches.dtype)
    for r in range(rows):
        for c in range(cols):
            block = grid.patches[r * cols + c].reshape(grid.patch_h, grid.patch_w)
            out[r * grid.patch_h:(r + 1) * grid.patch_h,
                c * grid.patch_w:(c + 1) * grid.patch_w] = block
    return out


@dataclass(frozen=True)
class Standardization:
    """Frozen global mean/std transform, fit once on training data."""

    mean: float
    std: float
    degenerate: bool = False

    def apply(self, spec: Spectrogram) -> Spectrogram:
        values = ((spec.values - self.mean) / self.std).astype(np.float32)
        return Spectrogram(values=values, freq_range_hz=spec.freq_range_hz,
                           frame_hop_s=spec.frame_hop_s)

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        return ((values - self.mean) / self.std).astype(values.dtype)


def dataset_standardize(specs) -> Standardization:
    """Fit a global zero-mean unit-std transform over a spectrogram collection.

    Uses the population std so re-standardizing the same collection yields
    exactly (0, 1). Zero variance falls back to std = 1 with the degenerate
    flag set.
    """
    specs = list(specs)
    if not specs:
        raise InvalidInput("cannot standardize an empty collection")
    count = 0
    total = 0.0
    total_sq = 0.0
    for spec in specs:
        v = spec.values.astype(np.float64)
        count += v.size
        total += v.sum()
        total_sq += (v * v).sum()
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    if var == 0.0:
        return Standardization(mean=mean, std=1.0, degenerate=True)
    return Standardization(mean=mean, std=math.sqrt(var))


_TENSOR_MAGIC = b"LSTN"


def save_tensor(path, array: np.ndarray) -> None:
    """Write a float32 tensor as magic + ndim + shape (uint32 LE) + row-major data."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor written by save_tensor."""
    with open(path, "rb") as fh:
        if fh.read(4) != _TENSOR_MAGIC:
            raise InvalidInput(f"{path} is not a tensor container")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.float32)
    expected = int(np.prod(shape)) if ndim else 1
    if data.size != expected:
        raise InvalidInput(f"{path} payload size {data.size} does not match shape {shape}")
    return data.reshape(shape).copy()


def save_spectrogram(path, spec: Spectrogram) -> None:
    save_tensor(path, spec.values)


def load_spectrogram(path, cfg: FeatureConfig) -> Spectrogram:
    values = load_tensor(path)
    return Spectrogram(values=values, freq_range_hz=(cfg.freq_low_hz, cfg.freq_high_hz),
                       frame_hop_s=cfg.hop_s)
