"""Residual vector quantization: codebooks, k-means bootstrap, cascade,
straight-through gradients, and the 1024->64 embedding reducer."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .signal import FeatureSequence

CODEBOOK_SIZE = 64  # fixed codebook size; 6 bits per index
CODEBOOK_MAGIC = b"RVQC"
CODEBOOK_VERSION = 1


class QuantizerError(ValueError):
    pass


@dataclass
class Codebook:
    entries: np.ndarray  # K x D
    id: str = ""

    def __post_init__(self):
        self.entries = np.atleast_2d(np.asarray(self.entries))
        if self.entries.shape[0] < 1:
            raise QuantizerError("codebook needs at least one entry")
        if not np.all(np.isfinite(self.entries)):
            raise QuantizerError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class RvqState:
    stages: list[Codebook] = field(default_factory=list)

    def __post_init__(self):
        if not self.stages:
            raise QuantizerError("cascade needs at least one stage")
        dims = {c.dim for c in self.stages}
        if len(dims) != 1:
            raise QuantizerError(f"stages disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    @property
    def num_stages(self) -> int:
        return len(self.stages)


@dataclass
class QuantizedFrames:
    indices: np.ndarray  # frames x stages, ints in [0, K)
    reconstruction: FeatureSequence


def _sq_distances(frames: np.ndarray, entries: np.ndarray) -> np.ndarray:
    # literal squared euclidean so exact ties resolve by lowest index
    diff = frames[:, None, :] - entries[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest(c: Codebook, v: np.ndarray) -> tuple[int, np.ndarray]:
    """Index and entry of the codebook row closest to v (squared euclidean)."""
    v = np.asarray(v).reshape(-1)
    if v.shape[0] != c.dim:
        raise QuantizerError(f"vector dim {v.shape[0]} != codebook dim {c.dim}")
    idx = int(np.argmin(_sq_distances(v[None, :], c.entries)[0]))
    return idx, c.entries[idx]


def _assign(frames: np.ndarray, entries: np.ndarray) -> np.ndarray:
    return np.argmin(_sq_distances(frames, entries), axis=1)


def kmeans(batch: np.ndarray, k: int, iters: int, seed: int):
    """Lloyd's algorithm seeded from k distinct batch frames.

    Returns (centroids, distortions) where distortions[i] is the mean squared
    assignment distance after iteration i; the sequence is non-increasing.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = batch.shape[0]
    if n < 1:
        raise QuantizerError("k-means needs a non-empty batch")
    rng = np.random.default_rng(seed)
    picks = rng.choice(n, size=k, replace=n < k)
    centroids = batch[picks].copy()
    distortions = []
    for _ in range(iters):
        assign = _assign(batch, centroids)
        dists = np.sum((batch - centroids[assign]) ** 2, axis=1)
        empty = [c for c in range(k) if not np.any(assign == c)]
        if empty:
            # reseed each empty cluster with the frame farthest from its centroid
            order = np.argsort(-dists, kind="stable")
            for c, j in zip(empty, order):
                centroids[c] = batch[j]
                assign[j] = c
                dists[j] = 0.0
        for c in range(k):
            members = assign == c
            if np.any(members):
                centroids[c] = batch[members].mean(axis=0)
        assign = _assign(batch, centroids)
        distortions.append(float(np.mean(np.sum((batch - centroids[assign]) ** 2, axis=1))))
    return centroids, distortions


def kmeans_init(batch, k: int = CODEBOOK_SIZE, iters: int = 10, seed: int = 0,
                id: str = "") -> Codebook:
    frames = batch.frames if isinstance(batch, FeatureSequence) else batch
    centroids, _ = kmeans(frames, k, iters, seed)
    return Codebook(entries=centroids, id=id)


def rvq_quantize(s: RvqState, f) -> QuantizedFrames:
    """Greedy cascade: each stage quantizes the previous stage's residual."""
    frame_rate = f.frame_rate if isinstance(f, FeatureSequence) else 0.0
    frames = np.atleast_2d(f.frames if isinstance(f, FeatureSequence) else np.asarray(f))
    if frames.shape[1] != s.dim:
        raise QuantizerError(f"frame dim {frames.shape[1]} != cascade dim {s.dim}")
    n = frames.shape[0]
    indices = np.zeros((n, s.num_stages), dtype=np.int64)
    recon = np.zeros_like(frames)
    residual = frames.copy()
    for j, cb in enumerate(s.stages):
        entries = cb.entries.astype(frames.dtype, copy=False)
        idx = _assign(residual, entries)
        picked = entries[idx]
        indices[:, j] = idx
        recon = recon + picked
        residual = residual - picked
    return QuantizedFrames(indices=indices,
                           reconstruction=FeatureSequence(frames=recon, frame_rate=frame_rate))


def rvq_dequantize(s: RvqState, indices: np.ndarray, frame_rate: float = 0.0) -> FeatureSequence:
    """Sum of per-stage codebook lookups; bit-exact inverse of rvq_quantize."""
    indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    if indices.shape[1] != s.num_stages:
        raise QuantizerError(f"expected {s.num_stages} index columns, got {indices.shape[1]}")
    recon = np.zeros((indices.shape[0], s.dim), dtype=s.stages[0].entries.dtype)
    for j, cb in enumerate(s.stages):
        col = indices[:, j]
        if np.any(col < 0) or np.any(col >= cb.size):
            raise QuantizerError(f"stage {j} index out of range [0, {cb.size})")
        recon = recon + cb.entries.astype(recon.dtype, copy=False)[col]
    return FeatureSequence(frames=recon, frame_rate=frame_rate)


def straight_through(f: eg.DiffNode, s: RvqState) -> eg.DiffNode:
    """Forward: cascade reconstruction of f's rows. Backward: identity to f.

    Codebooks receive no gradient through this path.
    """
    if f.ndim != 2 or f.shape[1] != s.dim:
        raise QuantizerError(f"expected frames x {s.dim}, got {f.shape}")
    q = rvq_quantize(s, f.value)
    recon = q.reconstruction.frames.astype(f.dtype, copy=False)
    return eg.identity_grad_node(recon, f)


def quantize_with_loss(f: eg.DiffNode, stage_tables: list[eg.DiffNode], beta: float,
                       batch: int = 1,
                       include_codebook: bool = True, include_commitment: bool = True):
    """Cascade quantization for training.

    Returns (st, q_loss, indices): `st` carries the reconstruction forward and
    routes its gradient straight through to `f`; `q_loss` is the per-stage
    codebook + beta-weighted commitment objective, summed over the feature
    sequence and averaged over `batch` utterances. Its gradients reach the
    codebook tables only via the codebook term and `f` only via the
    commitment term.
    """
    if f.ndim != 2:
        raise QuantizerError("quantize_with_loss expects a frames x dim node")
    residual = f
    recon = np.zeros_like(f.value)
    terms = []
    index_cols = []
    for table in stage_tables:
        idx = _assign(residual.value, table.value)
        index_cols.append(idx)
        picked = eg.embed_rows(table, idx)
        recon = recon + picked.value
        if include_codebook:
            d = eg.sub(eg.stop_gradient(residual), picked)
            terms.append(eg.mul(eg.sum_(eg.mul(d, d)), 1.0 / batch))
        if include_commitment:
            d = eg.sub(eg.stop_gradient(picked), residual)
            terms.append(eg.mul(eg.mul(eg.sum_(eg.mul(d, d)), 1.0 / batch), beta))
        residual = eg.sub(residual, eg.stop_gradient(picked))
    q_loss = terms[0] if terms else eg.constant(0.0, f.dtype)
    for t in terms[1:]:
        q_loss = eg.add(q_loss, t)
    indices = np.stack(index_cols, axis=1)
    st = eg.identity_grad_node(recon, f)
    return st, q_loss, indices


def reduce_dim(emb: eg.DiffNode, w: eg.DiffNode) -> eg.DiffNode:
    """Bias-free linear map from wide embeddings to the quantizer dimension."""
    if w.ndim != 2 or emb.shape[-1] != w.shape[0]:
        raise QuantizerError(f"reduce_dim shape mismatch: emb {emb.shape}, w {w.shape}")
    return eg.matmul(emb, w)


# ---------------------------------------------------------------------------
# codebook container: magic, version, D, K, stage count, then f32 entries


def dump_codebooks(s: RvqState) -> bytes:
    buf = io.BytesIO()
    buf.write(CODEBOOK_MAGIC)
    buf.write(struct.pack("<IIII", CODEBOOK_VERSION, s.dim, s.stages[0].size, s.num_stages))
    for cb in s.stages:
        if cb.size != s.stages[0].size:
            raise QuantizerError("container requires a uniform codebook size")
        buf.write(np.ascontiguousarray(cb.entries, dtype="<f4").tobytes())
    return buf.getvalue()


def save_codebooks(path, s: RvqState) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_codebooks(s))


def parse_codebooks(data: bytes, id_prefix: str = "") -> RvqState:
    if data[:4] != CODEBOOK_MAGIC:
        raise QuantizerError("bad codebook magic")
    version, dim, k, n_stages = struct.unpack_from("<IIII", data, 4)
    if version != CODEBOOK_VERSION:
        raise QuantizerError(f"unsupported codebook version {version}")
    off = 20
    stages = []
    need = 4 * k * dim
    for j in range(n_stages):
        if off + need > len(data):
            raise QuantizerError("truncated codebook container")
        entries = np.frombuffer(data[off : off + need], dtype="<f4").reshape(k, dim)
        stages.append(Codebook(entries=entries.astype(np.float64), id=f"{id_prefix}{j}"))
        off += need
    return RvqState(stages=stages)


def load_codebooks(path) -> RvqState:
    with open(path, "rb") as fh:
        return parse_codebooks(fh.read())
