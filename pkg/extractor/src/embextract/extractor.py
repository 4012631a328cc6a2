"""Run a self-supervised speech model over 16 kHz WAV files and write
25 Hz, 1024-dim embedding files.

Model ids:
  random-wav2vec2-<L>   a wav2vec2-style encoder with L transformer layers and
                        deterministic seeded weights (no network needed)
  hf:<repo-id>          any pretrained 1024-wide wav2vec2-family model from
                        the Hugging Face hub

The model's native 50 Hz hidden states are mean-pooled over adjacent frame
pairs down to 25 Hz, then trimmed or edge-padded so the frame count equals
round(duration * 25).
"""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
TARGET_FRAME_RATE = 25
EMBED_DIM = 1024

EMBED_MAGIC = b"TEMB"
EMBED_VERSION = 1

DEFAULT_MODEL = "random-wav2vec2-24"
DEFAULT_LAYER = 21
RANDOM_MODEL_SEED = 731

_model_cache: dict[str, object] = {}


class ExtractError(ValueError):
    pass


@dataclass
class Embeddings:
    model: str
    layer: int
    frames: np.ndarray  # n x 1024 float32
    frame_rate: int = TARGET_FRAME_RATE


def read_wav_mono16k(path) -> np.ndarray:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ExtractError(f"{path}: expected 16-bit mono PCM")
        if wf.getframerate() != SAMPLE_RATE:
            raise ExtractError(f"{path}: expected {SAMPLE_RATE} Hz audio")
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def write_embedding_file(path, emb: Embeddings) -> None:
    data = np.ascontiguousarray(emb.frames, dtype="<f4")
    if data.ndim != 2 or data.shape[1] != EMBED_DIM:
        raise ExtractError(f"embeddings must be frames x {EMBED_DIM}, got {data.shape}")
    buf = io.BytesIO()
    buf.write(EMBED_MAGIC)
    name = emb.model.encode("utf-8")
    buf.write(struct.pack("<IH", EMBED_VERSION, len(name)))
    buf.write(name)
    buf.write(struct.pack("<iIII", emb.layer, emb.frame_rate, data.shape[1], data.shape[0]))
    buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def _build_model(model_id: str):
    import torch
    from transformers import AutoModel, Wav2Vec2Config, Wav2Vec2Model

    if model_id.startswith("random-wav2vec2-"):
        try:
            layers = int(model_id.rsplit("-", 1)[1])
        except ValueError:
            raise ExtractError(f"bad random model id {model_id!r}; use random-wav2vec2-<layers>")
        config = Wav2Vec2Config(
            hidden_size=EMBED_DIM,
            num_hidden_layers=layers,
            num_attention_heads=16,
            intermediate_size=2 * EMBED_DIM,
            conv_dim=(128, 128, 128, 128, 128, 128, 128),
        )
        torch.manual_seed(RANDOM_MODEL_SEED)
        model = Wav2Vec2Model(config)
    elif model_id.startswith("hf:"):
        model = AutoModel.from_pretrained(model_id[3:])
        if model.config.hidden_size != EMBED_DIM:
            raise ExtractError(
                f"{model_id}: hidden size {model.config.hidden_size}, need {EMBED_DIM}")
    else:
        raise ExtractError(f"unknown model id {model_id!r} (use random-wav2vec2-<L> or hf:<repo>)")
    model.eval()
    return model


def _get_model(model_id: str):
    if model_id not in _model_cache:
        _model_cache[model_id] = _build_model(model_id)
    return _model_cache[model_id]


def _pool_to_25hz(hidden: np.ndarray, target_frames: int) -> np.ndarray:
    """Mean-pool adjacent 50 Hz frame pairs, then pin the count exactly."""
    n = hidden.shape[0]
    if n % 2:
        hidden = np.vstack([hidden, hidden[-1:]])
    pooled = 0.5 * (hidden[0::2] + hidden[1::2])
    while pooled.shape[0] < target_frames:
        pooled = np.vstack([pooled, pooled[-1:]])
    return pooled[:target_frames]


def extract(wav_path, layer: int = DEFAULT_LAYER, model_id: str = DEFAULT_MODEL) -> Embeddings:
    """Embeddings for the whole utterance at 25 Hz x 1024."""
    import torch

    samples = read_wav_mono16k(wav_path)
    if len(samples) < SAMPLE_RATE // TARGET_FRAME_RATE:
        raise ExtractError(f"{wav_path}: shorter than one embedding frame")
    model = _get_model(model_id)
    depth = model.config.num_hidden_layers
    if layer < 0 or layer > depth:
        raise ExtractError(f"layer {layer} out of range for a {depth}-layer model")

    # per-utterance feature normalization, as the pretraining pipeline uses
    mean, std = float(samples.mean()), float(samples.std())
    normalized = (samples - mean) / (std + 1e-7)

    torch.set_num_threads(1)  # keeps inference bit-reproducible
    with torch.inference_mode():
        inputs = torch.from_numpy(normalized)[None, :]
        out = model(inputs, output_hidden_states=True)
    hidden = out.hidden_states[layer][0].numpy().astype(np.float32)

    target = int(round(len(samples) / SAMPLE_RATE * TARGET_FRAME_RATE))
    frames = _pool_to_25hz(hidden, target)
    if not np.all(np.isfinite(frames)):
        raise ExtractError(f"{wav_path}: model produced non-finite embeddings")
    return Embeddings(model=model_id, layer=layer, frames=frames)


def extract_to_file(wav_path, out_path, layer: int = DEFAULT_LAYER,
                    model_id: str = DEFAULT_MODEL) -> Embeddings:
    emb = extract(wav_path, layer=layer, model_id=model_id)
    write_embedding_file(out_path, emb)
    return emb
