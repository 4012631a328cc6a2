"""STFT, mel filterbank, and waveform utilities at a fixed 16 kHz rate.

The mel scale follows the HTK convention m = 2595*log10(1 + f/700) over
0..8000 Hz with 64 bands. Filter weights are the triangle averaged over each
FFT bin's band rather than point-sampled, so every band keeps positive weight
even at short analysis windows.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass

import numpy as np

from . import engine as eg

SAMPLE_RATE = 16000
N_MELS = 64
F_MIN = 0.0
F_MAX = 8000.0
MEL_WINDOWS = (64, 128, 256, 512, 1024, 2048)


class SignalError(ValueError):
    pass


@dataclass
class Waveform:
    """Mono PCM samples, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise SignalError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass
class Spectrogram:
    """One-sided complex STFT, frames x (window/2+1) bins."""

    values: np.ndarray
    window_length: int
    hop: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]


@dataclass
class FeatureSequence:
    """frames x dim feature matrix with its frame rate in Hz."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames))

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class MelFilterbank:
    matrix: np.ndarray  # n_mels x bins, nonnegative
    f_min: float
    f_max: float
    n_mels: int = N_MELS
    window_length: int = 0


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def _check_window(window_length: int) -> None:
    if window_length < 64 or window_length > 2048 or window_length & (window_length - 1):
        raise SignalError(f"window length must be a power of two in 64..2048, got {window_length}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangle_integral(lo, mid, hi, a, b):
    """Integral of the unit triangle (lo,0)-(mid,1)-(hi,0) over [a, b]."""

    def rise(u, v):
        u = np.clip(u, lo, mid)
        v = np.clip(v, lo, mid)
        return ((v - lo) ** 2 - (u - lo) ** 2) / (2.0 * (mid - lo))

    def fall(u, v):
        u = np.clip(u, mid, hi)
        v = np.clip(v, mid, hi)
        return ((hi - u) ** 2 - (hi - v) ** 2) / (2.0 * (hi - mid))

    return rise(a, b) + fall(a, b)


@functools.lru_cache(maxsize=None)
def mel_filterbank(window_length: int, n_mels: int = N_MELS,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> MelFilterbank:
    _check_window(window_length)
    bins = window_length // 2 + 1
    df = SAMPLE_RATE / window_length
    centers = np.arange(bins) * df
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    matrix = np.zeros((n_mels, bins))
    band_lo = centers - df / 2.0
    band_hi = centers + df / 2.0
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        matrix[m] = _triangle_integral(lo, mid, hi, band_lo, band_hi) / df
    return MelFilterbank(matrix=matrix, f_min=f_min, f_max=f_max,
                         n_mels=n_mels, window_length=window_length)


def stft(x, window_length: int, hop: int) -> Spectrogram:
    """Hann-windowed one-sided STFT without centering or padding."""
    _check_window(window_length)
    if hop < 1:
        raise SignalError("hop must be >= 1")
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    if samples.ndim != 1:
        raise SignalError("stft expects a 1-D signal")
    if len(samples) < window_length:
        raise SignalError("signal shorter than one window")
    win = hann_window(window_length)
    frames = np.lib.stride_tricks.sliding_window_view(samples, window_length)[::hop]
    spec = np.fft.rfft(frames * win, axis=-1)
    return Spectrogram(values=spec, window_length=window_length, hop=hop)


def mel_spectrogram(x, window_length: int) -> FeatureSequence:
    """64-band mel power features with hop = window/4."""
    hop = window_length // 4
    spec = stft(x, window_length, hop)
    power = np.abs(spec.values) ** 2
    mel = power @ mel_filterbank(window_length).matrix.T
    return FeatureSequence(frames=mel, frame_rate=SAMPLE_RATE / hop)


def mel_power_node(x: eg.DiffNode, window_length: int) -> eg.DiffNode:
    """Differentiable mel power features of waveform node [..., T]."""
    _check_window(window_length)
    hop = window_length // 4
    win = eg.constant(hann_window(window_length), x.dtype)
    frames = eg.mul(eg.frame_signal(x, window_length, hop), win)
    return eg.rfft_power_project(frames, mel_filterbank(window_length).matrix.T)


def replicate_frames(f: FeatureSequence, factor: int) -> FeatureSequence:
    """Duplicate each frame `factor` times, raising the frame rate."""
    if factor < 1:
        raise SignalError("replication factor must be >= 1")
    return FeatureSequence(frames=np.repeat(f.frames, factor, axis=0),
                           frame_rate=f.frame_rate * factor)


# ---------------------------------------------------------------------------
# WAV files: 16-bit PCM, mono, 16 kHz, little-endian RIFF


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise SignalError(f"{path}: expected mono audio")
        if wf.getsampwidth() != 2:
            raise SignalError(f"{path}: expected 16-bit PCM")
        if wf.getframerate() != SAMPLE_RATE:
            raise SignalError(f"{path}: expected {SAMPLE_RATE} Hz")
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(samples=pcm.astype(np.float64) / 32768.0)


def write_wav(path, x: Waveform) -> None:
    pcm = np.clip(np.round(x.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
