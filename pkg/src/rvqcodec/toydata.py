"""Synthetic training corpus: harmonic tones and filtered noise, paired with
deterministic random-projection embedding files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .embedfile import EMBED_DIM, EMBED_FRAME_RATE, EmbeddingFile, write_embeddings
from .nets import SAMPLES_PER_EMB_FRAME
from .signal import SAMPLE_RATE, Waveform, write_wav

PROJECTION_SEED = 0xE1B  # fixed so embeddings are a stable function of audio


def _tone(rng, n):
    f0 = float(rng.uniform(90.0, 260.0))
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    for h in range(1, 6):
        if f0 * h < 7500:
            x += rng.uniform(0.2, 1.0) / h * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    # slow amplitude contour so segments differ along the file
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi))
    x *= env
    return 0.5 * x / np.max(np.abs(x))


def _filtered_noise(rng, n):
    white = rng.standard_normal(n)
    a = float(rng.uniform(0.85, 0.99))  # one-pole lowpass, random cutoff
    y = lfilter([1.0 - a], [1.0, -a], white)
    env = 0.5 + 0.5 * np.abs(np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * np.arange(n) / SAMPLE_RATE))
    y *= env
    return 0.5 * y / np.max(np.abs(y))


def projection_matrix(dim_in: int = SAMPLES_PER_EMB_FRAME, dim_out: int = EMBED_DIM) -> np.ndarray:
    rng = np.random.default_rng(PROJECTION_SEED)
    return rng.standard_normal((dim_in, dim_out)) / np.sqrt(dim_in)


def project_embeddings(samples: np.ndarray) -> np.ndarray:
    """Random-projection stand-in for pretrained speech embeddings: frame the
    waveform at 25 Hz and project each frame to the embedding width."""
    n_frames = len(samples) // SAMPLES_PER_EMB_FRAME
    frames = np.asarray(samples[: n_frames * SAMPLES_PER_EMB_FRAME], dtype=np.float64)
    frames = frames.reshape(n_frames, SAMPLES_PER_EMB_FRAME)
    return np.tanh(frames @ projection_matrix())


def make_toy_corpus(out_dir, n_utterances: int = 20, seed: int = 0,
                    min_seconds: float = 1.92, max_seconds: float = 3.2) -> list[Path]:
    """Write WAV + embedding pairs; returns the WAV paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_utterances):
        dur = float(rng.uniform(min_seconds, max_seconds))
        n = int(dur * SAMPLE_RATE) // SAMPLES_PER_EMB_FRAME * SAMPLES_PER_EMB_FRAME
        x = _tone(rng, n) if i % 2 == 0 else _filtered_noise(rng, n)
        # embed exactly what a reader of the 16-bit file will see
        x = np.clip(np.round(x * 32768.0), -32768, 32767) / 32768.0
        wav_path = out / f"utt{i:03d}.wav"
        write_wav(wav_path, Waveform(samples=x))
        emb = project_embeddings(x).astype(np.float32)
        write_embeddings(out / f"utt{i:03d}.temb",
                         EmbeddingFile(model="toy-projection", layer=0, embeddings=emb,
                                       frame_rate=EMBED_FRAME_RATE))
        paths.append(wav_path)
    return paths
