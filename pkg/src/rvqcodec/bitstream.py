"""Bitrate allocation and the bit-exact packed stream container.

With 64-entry codebooks every index costs 6 bits, so a stream at 25 Hz
carries 150 bps per stage and one at 50 Hz carries 300 bps per stage.
Payload layout interleaves per 40 ms super-frame: the embedding-stream
indices for one 25 Hz frame, then the CNN-stream indices for the two
50 Hz frames it spans.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

BITS_PER_INDEX = 6
T_FRAME_RATE = 25
C_FRAME_RATE = 50
SUPERFRAME_SECONDS = 1.0 / T_FRAME_RATE

STREAM_MAGIC = b"TXRV"
STREAM_VERSION = 1
HASH_LEN = 8


class BitstreamError(ValueError):
    pass


class UnrealizableAllocation(BitstreamError):
    pass


@dataclass(frozen=True)
class BitrateAllocation:
    total_bps: int
    t_stages: int
    c_stages: int
    bits_per_index: int = BITS_PER_INDEX
    t_frame_rate: int = T_FRAME_RATE
    c_frame_rate: int = C_FRAME_RATE

    def __post_init__(self):
        if self.t_stages < 0 or self.c_stages < 0 or self.t_stages + self.c_stages == 0:
            raise BitstreamError("allocation needs at least one stage")
        payload = (self.t_frame_rate * self.bits_per_index * self.t_stages
                   + self.c_frame_rate * self.bits_per_index * self.c_stages)
        if payload != self.total_bps:
            raise BitstreamError(
                f"stage counts produce {payload} bps, not the declared {self.total_bps}")

    @property
    def bits_per_superframe(self) -> int:
        return self.bits_per_index * (self.t_stages + 2 * self.c_stages)


def plan_allocation(total_bps: int, split: str) -> BitrateAllocation:
    """Stage counts for a total bitrate under an 'even' or a
    'third' (one-third-transformer) split."""
    if total_bps <= 0:
        raise UnrealizableAllocation("unrealizable allocation: bitrate must be positive")
    if split == "even":
        t_bps, r = divmod(total_bps, 2)
        c_bps = total_bps - t_bps
        if r:
            raise UnrealizableAllocation(
                f"unrealizable allocation: {total_bps} bps does not split evenly")
    elif split == "third":
        t_bps, r = divmod(total_bps, 3)
        c_bps = total_bps - t_bps
        if r:
            raise UnrealizableAllocation(
                f"unrealizable allocation: {total_bps} bps has no 1/3-2/3 split")
    else:
        raise BitstreamError(f"unknown split {split!r} (use 'even' or 'third')")
    t_stages, tr = divmod(t_bps, T_FRAME_RATE * BITS_PER_INDEX)
    c_stages, cr = divmod(c_bps, C_FRAME_RATE * BITS_PER_INDEX)
    if tr or cr or t_stages < 1 or c_stages < 1:
        raise UnrealizableAllocation(
            f"unrealizable allocation: {total_bps} bps ({split}) needs non-integer stage counts")
    return BitrateAllocation(total_bps=total_bps, t_stages=int(t_stages), c_stages=int(c_stages))


def single_stream_allocation(total_bps: int, stream: str) -> BitrateAllocation:
    """Allocation carrying the whole budget on one stream (ablation runs)."""
    rate = T_FRAME_RATE if stream == "t" else C_FRAME_RATE
    stages, r = divmod(total_bps, rate * BITS_PER_INDEX)
    if r or stages < 1:
        raise UnrealizableAllocation(
            f"unrealizable allocation: {total_bps} bps on the {stream!r} stream alone")
    if stream == "t":
        return BitrateAllocation(total_bps=total_bps, t_stages=int(stages), c_stages=0)
    return BitrateAllocation(total_bps=total_bps, t_stages=0, c_stages=int(stages))


def pack_indices(indices) -> bytes:
    """MSB-first 6-bit fields, zero-padded to a byte boundary."""
    out = bytearray()
    acc = 0
    nbits = 0
    for v in np.asarray(indices, dtype=np.int64).reshape(-1):
        if v < 0 or v >= (1 << BITS_PER_INDEX):
            raise BitstreamError(f"index {v} does not fit in {BITS_PER_INDEX} bits")
        acc = (acc << BITS_PER_INDEX) | int(v)
        nbits += BITS_PER_INDEX
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def unpack_indices(data: bytes, count: int) -> list[int]:
    """Exact inverse of pack_indices for the first `count` fields."""
    need = count * BITS_PER_INDEX
    if len(data) * 8 < need:
        raise BitstreamError(f"truncated payload: need {need} bits, have {len(data) * 8}")
    out = []
    acc = 0
    nbits = 0
    pos = 0
    for _ in range(count):
        while nbits < BITS_PER_INDEX:
            acc = (acc << 8) | data[pos]
            pos += 1
            nbits += 8
        nbits -= BITS_PER_INDEX
        out.append((acc >> nbits) & ((1 << BITS_PER_INDEX) - 1))
        acc &= (1 << nbits) - 1
    return out


@dataclass
class EncodedStream:
    allocation: BitrateAllocation
    t_indices: np.ndarray  # n_super x t_stages
    c_indices: np.ndarray  # 2*n_super x c_stages
    codebook_hash: bytes

    def __post_init__(self):
        st, sc = self.allocation.t_stages, self.allocation.c_stages
        self.t_indices = (np.asarray(self.t_indices, dtype=np.int64).reshape(-1, st)
                          if st else np.zeros((0, 0), dtype=np.int64))
        self.c_indices = (np.asarray(self.c_indices, dtype=np.int64).reshape(-1, sc)
                          if sc else np.zeros((0, 0), dtype=np.int64))
        if st and sc and self.c_indices.shape[0] != 2 * self.t_indices.shape[0]:
            raise BitstreamError("CNN stream must carry two frames per super-frame")
        if len(self.codebook_hash) != HASH_LEN:
            raise BitstreamError(f"codebook hash must be {HASH_LEN} bytes")

    @property
    def superframes(self) -> int:
        if self.allocation.t_stages:
            return self.t_indices.shape[0]
        return self.c_indices.shape[0] // 2

    @property
    def duration(self) -> float:
        return self.superframes * SUPERFRAME_SECONDS

    @property
    def payload_bits(self) -> int:
        return self.superframes * self.allocation.bits_per_superframe

    def interleaved(self) -> np.ndarray:
        """Per super-frame: t indices, then the two c frames' indices."""
        n = self.superframes
        st, sc = self.allocation.t_stages, self.allocation.c_stages
        out = np.zeros((n, st + 2 * sc), dtype=np.int64)
        if st:
            out[:, :st] = self.t_indices[:n]
        if sc:
            out[:, st : st + sc] = self.c_indices[0 : 2 * n : 2]
            out[:, st + sc :] = self.c_indices[1 : 2 * n : 2]
        return out


def build_stream(allocation: BitrateAllocation, t_indices, c_indices,
                 codebook_hash: bytes) -> EncodedStream:
    t = np.asarray(t_indices, dtype=np.int64).reshape(-1, max(allocation.t_stages, 1))[:, : allocation.t_stages]
    c = np.asarray(c_indices, dtype=np.int64).reshape(-1, max(allocation.c_stages, 1))[:, : allocation.c_stages]
    return EncodedStream(allocation=allocation, t_indices=t, c_indices=c,
                         codebook_hash=codebook_hash)


def serialize_stream(stream: EncodedStream) -> bytes:
    a = stream.allocation
    header = STREAM_MAGIC + struct.pack(
        "<HIBBI", STREAM_VERSION, a.total_bps, a.t_stages, a.c_stages, stream.superframes
    ) + stream.codebook_hash
    return header + pack_indices(stream.interleaved())


def parse_stream(data: bytes) -> EncodedStream:
    if data[:4] != STREAM_MAGIC:
        raise BitstreamError("bad stream magic")
    version, total_bps, t_stages, c_stages, n_super = struct.unpack_from("<HIBBI", data, 4)
    if version != STREAM_VERSION:
        raise BitstreamError(f"unsupported stream version {version}")
    off = 4 + 12
    codebook_hash = data[off : off + HASH_LEN]
    if len(codebook_hash) != HASH_LEN:
        raise BitstreamError("truncated stream header")
    allocation = BitrateAllocation(total_bps=total_bps, t_stages=t_stages, c_stages=c_stages)
    payload = data[off + HASH_LEN :]
    per_frame = t_stages + 2 * c_stages
    fields = unpack_indices(payload, n_super * per_frame)
    grid = np.asarray(fields, dtype=np.int64).reshape(n_super, per_frame)
    t_idx = grid[:, :t_stages]
    c_idx = np.zeros((2 * n_super, c_stages), dtype=np.int64)
    if c_stages:
        c_idx[0::2] = grid[:, t_stages : t_stages + c_stages]
        c_idx[1::2] = grid[:, t_stages + c_stages :]
    return EncodedStream(allocation=allocation, t_indices=t_idx, c_indices=c_idx,
                         codebook_hash=codebook_hash)


def measured_bitrate(stream: EncodedStream, duration_s: float) -> float:
    """Payload bits over duration; header and byte padding excluded."""
    if duration_s <= 0:
        raise BitstreamError("duration must be positive")
    return stream.payload_bits / duration_s
