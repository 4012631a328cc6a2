"""Reader/writer for precomputed speech-embedding files.

This little-endian container is the contract with the offline extractor:
magic, version, model identifier, layer index, frame rate (25 Hz), dim
(1024), frame count, then row-major float32 frames. Values round-trip
32-bit exact.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

EMBED_MAGIC = b"TEMB"
EMBED_VERSION = 1
EMBED_FRAME_RATE = 25
EMBED_DIM = 1024


class EmbedFileError(ValueError):
    pass


@dataclass
class EmbeddingFile:
    model: str
    layer: int
    embeddings: np.ndarray  # frames x dim, float32
    frame_rate: int = EMBED_FRAME_RATE

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise EmbedFileError("embeddings must be a frames x dim matrix")

    @property
    def frames(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def write_embeddings(path, ef: EmbeddingFile) -> None:
    buf = io.BytesIO()
    buf.write(EMBED_MAGIC)
    raw = ef.model.encode("utf-8")
    buf.write(struct.pack("<IH", EMBED_VERSION, len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<iIII", ef.layer, ef.frame_rate, ef.dim, ef.frames))
    buf.write(ef.embeddings.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_embeddings(path) -> EmbeddingFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != EMBED_MAGIC:
        raise EmbedFileError(f"{path}: bad embedding-file magic")
    version, name_len = struct.unpack_from("<IH", data, 4)
    if version != EMBED_VERSION:
        raise EmbedFileError(f"{path}: unsupported version {version}")
    off = 10
    model = data[off : off + name_len].decode("utf-8")
    off += name_len
    layer, frame_rate, dim, frames = struct.unpack_from("<iIII", data, off)
    off += 16
    need = 4 * dim * frames
    if len(data) < off + need:
        raise EmbedFileError(f"{path}: truncated embedding data")
    emb = np.frombuffer(data[off : off + need], dtype="<f4").reshape(frames, dim)
    return EmbeddingFile(model=model, layer=layer, embeddings=emb.copy(), frame_rate=frame_rate)
