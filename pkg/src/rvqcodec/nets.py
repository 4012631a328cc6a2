"""Desk-scale codec networks: strided CNN encoder (320x total stride, 50 Hz
features), mirrored transposed-conv generator, one STFT discriminator and
three wave discriminators at decimation factors 1, 2, 4."""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import quantizer as qz
from .losses import DiscriminatorOutput
from .signal import hann_window

SAMPLES_PER_FRAME = 320  # 16 kHz -> 50 Hz feature rate
SAMPLES_PER_EMB_FRAME = 640  # 16 kHz -> 25 Hz embedding rate
FEATURE_DIM = 64
EMBEDDING_DIM = 1024

ENCODER_STRIDES = (2, 4, 5, 8)
ENCODER_CHANNELS = (16, 32, 32, 64)
ENCODER_KERNELS = (4, 8, 5, 8)
ENCODER_PADS = (1, 2, 0, 0)

GENERATOR_STRIDES = (8, 5, 4, 2)
GENERATOR_CHANNELS = (48, 24, 12, 8)
GENERATOR_KERNELS = (16, 11, 8, 4)
GENERATOR_PADS = (4, 3, 2, 1)

WAVE_FACTORS = (1, 2, 4)

CHECKPOINT_MAGIC = b"TXCK"
CHECKPOINT_VERSION = 1


class NetError(ValueError):
    pass


class ConvLayer:
    """One conv (or transposed conv) with bias."""

    def __init__(self, rng, c_in, c_out, kernel, stride, padding, transposed=False):
        self.stride = stride
        self.padding = padding
        self.transposed = transposed
        fan_in = c_in * kernel
        shape = (c_in, c_out, kernel) if transposed else (c_out, c_in, kernel)
        self.kernel = eg.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape))
        self.bias = eg.parameter(np.zeros(c_out))

    def __call__(self, x: eg.DiffNode) -> eg.DiffNode:
        if self.transposed:
            return eg.conv1d_transposed(x, self.kernel, self.stride, self.padding, bias=self.bias)
        return eg.conv1d(x, self.kernel, self.stride, self.padding, bias=self.bias)

    def parameters(self):
        return [self.kernel, self.bias]


class Conv2dLayer:
    def __init__(self, rng, c_in, c_out, kernel, stride, padding):
        self.stride = stride
        self.padding = padding
        kh, kw = kernel
        fan_in = c_in * kh * kw
        self.kernel = eg.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (c_out, c_in, kh, kw)))
        self.bias = eg.parameter(np.zeros(c_out))

    def __call__(self, x: eg.DiffNode) -> eg.DiffNode:
        return eg.conv2d(x, self.kernel, self.stride, self.padding, bias=self.bias)

    def parameters(self):
        return [self.kernel, self.bias]


class EncoderNet:
    """Four strided conv blocks with ELU; 16 kHz waveform -> 50 Hz, 64 dims."""

    def __init__(self, rng):
        self.layers = []
        c_in = 1
        for c_out, k, s, p in zip(ENCODER_CHANNELS, ENCODER_KERNELS, ENCODER_STRIDES, ENCODER_PADS):
            self.layers.append(ConvLayer(rng, c_in, c_out, k, s, p))
            c_in = c_out

    def __call__(self, x: eg.DiffNode) -> eg.DiffNode:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = eg.elu(h)
        return h  # [B, 64, T/320]

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]


class GeneratorNet:
    """Mirrored transposed-conv stack; frames x channels -> waveform samples."""

    def __init__(self, rng, in_channels=2 * FEATURE_DIM):
        self.in_channels = in_channels
        self.layers = []
        c_in = in_channels
        for c_out, k, s, p in zip(GENERATOR_CHANNELS, GENERATOR_KERNELS,
                                  GENERATOR_STRIDES, GENERATOR_PADS):
            self.layers.append(ConvLayer(rng, c_in, c_out, k, s, p, transposed=True))
            c_in = c_out
        self.out_layer = ConvLayer(rng, c_in, 1, 7, 1, 3)

    def __call__(self, features: eg.DiffNode) -> eg.DiffNode:
        h = features
        for layer in self.layers:
            h = eg.elu(layer(h))
        return eg.tanh(self.out_layer(h))  # [B, 1, frames*320]

    def parameters(self):
        ps = [p for l in self.layers for p in l.parameters()]
        return ps + self.out_layer.parameters()


class WaveDiscriminator:
    """Time-domain discriminator on an average-pooled waveform."""

    def __init__(self, rng, factor):
        if factor not in WAVE_FACTORS:
            raise NetError(f"decimation factor must be one of {WAVE_FACTORS}")
        self.factor = factor
        self.layers = [
            ConvLayer(rng, 1, 8, 15, 8, 7),
            ConvLayer(rng, 8, 16, 7, 4, 3),
            ConvLayer(rng, 16, 16, 7, 4, 3),
        ]
        self.logit_layer = ConvLayer(rng, 16, 1, 3, 1, 1)

    def __call__(self, x: eg.DiffNode) -> DiscriminatorOutput:
        if x.shape[-1] % self.factor:
            raise NetError(f"input length not divisible by decimation factor {self.factor}")
        if x.ndim != 2:
            raise NetError(f"wave discriminator expects [B, T], got {x.shape}")
        h = eg.avg_pool1d(x, self.factor)
        h = eg.reshape(h, (h.shape[0], 1, h.shape[1]))
        maps = []
        for layer in self.layers:
            h = eg.leaky_relu(layer(h), 0.2)
            maps.append(h)
        logits = self.logit_layer(h)
        # drop the channel axis of size 1
        logits = eg.reshape(logits, logits.shape[:-2] + (logits.shape[-1],))
        return DiscriminatorOutput(logits=logits, feature_maps=maps)

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()] + self.logit_layer.parameters()


class StftDiscriminator:
    """2-D conv stack over the STFT with real/imag parts as input channels."""

    WINDOW = 1024
    HOP = 256

    def __init__(self, rng):
        self.layers = [
            Conv2dLayer(rng, 2, 4, (3, 5), (2, 4), (1, 2)),
            Conv2dLayer(rng, 4, 8, (3, 5), (2, 4), (1, 2)),
            Conv2dLayer(rng, 8, 16, (3, 5), (2, 2), (1, 2)),
        ]
        self.logit_layer = Conv2dLayer(rng, 16, 1, (3, 3), (1, 1), (1, 1))

    def __call__(self, x: eg.DiffNode) -> DiscriminatorOutput:
        if x.shape[-1] < self.WINDOW:
            raise NetError("input shorter than the analysis window")
        win = eg.constant(hann_window(self.WINDOW) * (2.0 / self.WINDOW), x.dtype)
        frames = eg.mul(eg.frame_signal(x, self.WINDOW, self.HOP), win)
        h = eg.rfft2ch(frames)  # [..., 2, F, bins]
        maps = []
        for layer in self.layers:
            h = eg.leaky_relu(layer(h), 0.2)
            maps.append(h)
        logits = self.logit_layer(h)
        logits = eg.mean(logits, axis=-1)  # collapse frequency
        logits = eg.reshape(logits, logits.shape[:-2] + (logits.shape[-1],))
        return DiscriminatorOutput(logits=logits, feature_maps=maps)

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()] + self.logit_layer.parameters()


class DiscriminatorSet:
    """D_0 on the STFT plus wave discriminators at factors 1, 2, 4."""

    def __init__(self, rng):
        self.stft = StftDiscriminator(rng)
        self.waves = [WaveDiscriminator(rng, f) for f in WAVE_FACTORS]

    def __call__(self, x: eg.DiffNode) -> list[DiscriminatorOutput]:
        return [self.stft(x)] + [w(x) for w in self.waves]

    def parameters(self):
        ps = self.stft.parameters()
        for w in self.waves:
            ps += w.parameters()
        return ps

    def named_parameters(self):
        out = {}
        for i, p in enumerate(self.stft.parameters()):
            out[f"disc.stft.{i}"] = p
        for w in self.waves:
            for i, p in enumerate(w.parameters()):
                out[f"disc.wave{w.factor}.{i}"] = p
        return out


def _as_wave_node(x) -> tuple[eg.DiffNode, bool]:
    x = getattr(x, "samples", x)  # accept Waveform
    node = x if isinstance(x, eg.DiffNode) else eg.constant(np.asarray(x))
    if node.ndim == 1:
        return eg.reshape(node, (1,) + node.shape), True
    if node.ndim != 2:
        raise NetError(f"expected waveform [T] or [B, T], got {node.shape}")
    return node, False


def encode_cnn(net: EncoderNet, x) -> eg.DiffNode:
    """Waveform (multiple of 320 samples) -> frames x 64 features at 50 Hz."""
    node, squeeze = _as_wave_node(x)
    if node.shape[-1] % SAMPLES_PER_FRAME:
        raise NetError(f"segment length must be divisible by {SAMPLES_PER_FRAME}")
    h = net(eg.reshape(node, (node.shape[0], 1, node.shape[1])))
    out = eg.transpose(h, (0, 2, 1))  # [B, frames, 64]
    return eg.reshape(out, out.shape[1:]) if squeeze else out


def decode(net: GeneratorNet, features: eg.DiffNode) -> eg.DiffNode:
    """frames x channels features -> waveform node, 320 samples per frame."""
    squeeze = features.ndim == 2
    f = eg.reshape(features, (1,) + features.shape) if squeeze else features
    if f.shape[-1] != net.in_channels:
        raise NetError(f"generator expects {net.in_channels} channels, got {f.shape[-1]}")
    h = net(eg.transpose(f, (0, 2, 1)))
    wave = eg.reshape(h, (h.shape[0], h.shape[-1]))
    return eg.reshape(wave, (wave.shape[-1],)) if squeeze else wave


def concatenate_streams(t_emb_q: eg.DiffNode, cnn_q: eg.DiffNode) -> eg.DiffNode:
    """Replicate 25 Hz quantized embeddings to 50 Hz, then channel-concat
    them (embedding channels first) with the 50 Hz CNN features."""
    frame_axis = t_emb_q.ndim - 2
    if 2 * t_emb_q.shape[frame_axis] != cnn_q.shape[frame_axis]:
        raise NetError(
            f"frame-rate mismatch: {t_emb_q.shape[frame_axis]} embedding frames "
            f"vs {cnn_q.shape[frame_axis]} CNN frames")
    rep = eg.repeat_frames(t_emb_q, 2, axis=frame_axis)
    return eg.concat([rep, cnn_q], axis=t_emb_q.ndim - 1)


def discriminate(disc, x) -> DiscriminatorOutput:
    node, squeeze = _as_wave_node(x)
    out = disc(node)
    if not squeeze:
        return out
    return DiscriminatorOutput(
        logits=eg.reshape(out.logits, out.logits.shape[1:]),
        feature_maps=[eg.reshape(m, m.shape[1:]) for m in out.feature_maps],
    )


# ---------------------------------------------------------------------------
# codec bundle


@dataclass
class CodecConfig:
    variant: str = "both"  # both | transformer | cnn
    t_stages: int = 2
    c_stages: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("both", "transformer", "cnn"):
            raise NetError(f"unknown variant {self.variant!r}")
        if self.variant in ("both", "transformer") and self.t_stages < 1:
            raise NetError("transformer stream needs at least one stage")
        if self.variant in ("both", "cnn") and self.c_stages < 1:
            raise NetError("CNN stream needs at least one stage")

    @property
    def has_t(self) -> bool:
        return self.variant in ("both", "transformer")

    @property
    def has_c(self) -> bool:
        return self.variant in ("both", "cnn")


class Codec:
    """Encoder-side and generator-side parameters of one codec variant."""

    def __init__(self, config: CodecConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = EncoderNet(rng) if config.has_c else None
        self.reduce_w = (
            eg.parameter(rng.normal(0.0, 1.0 / np.sqrt(EMBEDDING_DIM),
                                    (EMBEDDING_DIM, FEATURE_DIM)))
            if config.has_t else None
        )
        in_ch = FEATURE_DIM * (int(config.has_t) + int(config.has_c))
        self.generator = GeneratorNet(rng, in_channels=in_ch)
        k = qz.CODEBOOK_SIZE
        self.t_tables = [eg.parameter(np.zeros((k, FEATURE_DIM)))
                         for _ in range(config.t_stages)] if config.has_t else []
        self.c_tables = [eg.parameter(np.zeros((k, FEATURE_DIM)))
                         for _ in range(config.c_stages)] if config.has_c else []

    def parameters(self):
        ps = []
        if self.encoder is not None:
            ps += self.encoder.parameters()
        if self.reduce_w is not None:
            ps.append(self.reduce_w)
        ps += self.generator.parameters()
        ps += self.t_tables + self.c_tables
        return ps

    def named_parameters(self):
        out = {}
        if self.encoder is not None:
            for i, p in enumerate(self.encoder.parameters()):
                out[f"encoder.{i}"] = p
        if self.reduce_w is not None:
            out["reduce.w"] = self.reduce_w
        for i, p in enumerate(self.generator.parameters()):
            out[f"generator.{i}"] = p
        for j, t in enumerate(self.t_tables):
            out[f"rvq_t.{j}"] = t
        for j, t in enumerate(self.c_tables):
            out[f"rvq_c.{j}"] = t
        return out

    def rvq_state(self, stream: str) -> qz.RvqState:
        tables = self.t_tables if stream == "t" else self.c_tables
        if not tables:
            raise NetError(f"codec variant {self.config.variant!r} has no {stream!r} stream")
        return qz.RvqState(stages=[qz.Codebook(entries=t.value, id=f"{stream}{j}")
                                   for j, t in enumerate(tables)])

    def codebook_hash(self) -> bytes:
        """Hash binding a bitstream to the codebooks that produced it."""
        h = hashlib.sha256()
        for stream in ("t", "c"):
            tables = self.t_tables if stream == "t" else self.c_tables
            if tables:
                state = self.rvq_state(stream)
                h.update(qz.dump_codebooks(state))
            else:
                h.update(b"NONE")
        return h.digest()[:8]

    # inference helpers (arrays in, arrays out)

    def encode_arrays(self, samples: np.ndarray, embeddings=None):
        """Quantize one utterance; returns (t_indices, c_indices)."""
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if len(samples) % SAMPLES_PER_EMB_FRAME:
            raise NetError(f"length must be a multiple of {SAMPLES_PER_EMB_FRAME} samples")
        n_t = len(samples) // SAMPLES_PER_EMB_FRAME
        t_idx = np.zeros((n_t, 0), dtype=np.int64)
        c_idx = np.zeros((2 * n_t, 0), dtype=np.int64)
        if self.config.has_t:
            if embeddings is None:
                raise NetError("this codec variant needs an embedding sequence")
            embeddings = np.asarray(embeddings, dtype=np.float64)
            if embeddings.shape != (n_t, EMBEDDING_DIM):
                raise NetError(
                    f"expected embeddings {(n_t, EMBEDDING_DIM)}, got {embeddings.shape}")
            reduced = embeddings @ self.reduce_w.value.astype(np.float64)
            t_idx = qz.rvq_quantize(self.rvq_state("t"), reduced).indices
        if self.config.has_c:
            with eg.no_grad():
                feats = encode_cnn(self.encoder, samples)
            c_idx = qz.rvq_quantize(self.rvq_state("c"), feats.value.astype(np.float64)).indices
        return t_idx, c_idx

    def decode_arrays(self, t_indices: np.ndarray, c_indices: np.ndarray) -> np.ndarray:
        """Synthesize a waveform from per-stream stage indices."""
        parts = []
        n_frames = None
        if self.config.has_t:
            t = qz.rvq_dequantize(self.rvq_state("t"), t_indices).frames
            t = np.repeat(t, 2, axis=0)
            parts.append(t)
            n_frames = t.shape[0]
        if self.config.has_c:
            c = qz.rvq_dequantize(self.rvq_state("c"), c_indices).frames
            if n_frames is not None and c.shape[0] != n_frames:
                raise NetError(f"stream frame counts differ: {n_frames} vs {c.shape[0]}")
            parts.append(c)
        feats = np.concatenate(parts, axis=1)
        with eg.no_grad():
            wave = decode(self.generator, eg.constant(feats))
        return wave.value.astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoint container: named float32 tensors plus string metadata


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def write_checkpoint(path, meta: dict, tensors: dict) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(meta)))
    for k in sorted(meta):
        _write_str(buf, k)
        _write_str(buf, str(meta[k]))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        _write_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise NetError("bad checkpoint magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise NetError(f"unsupported checkpoint version {version}")
    (n_meta,) = struct.unpack("<I", buf.read(4))
    meta = {}
    for _ in range(n_meta):
        k = _read_str(buf)
        meta[k] = _read_str(buf)
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(n_tensors):
        name = _read_str(buf)
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()
    return meta, tensors


def save_codec(path, codec: Codec, discs: DiscriminatorSet | None = None,
               extra_meta: dict | None = None) -> None:
    meta = {
        "variant": codec.config.variant,
        "t_stages": codec.config.t_stages,
        "c_stages": codec.config.c_stages,
        "seed": codec.config.seed,
        "codebook_hash": codec.codebook_hash().hex(),
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors = {k: p.value for k, p in codec.named_parameters().items()}
    if discs is not None:
        tensors.update({k: p.value for k, p in discs.named_parameters().items()})
    write_checkpoint(path, meta, tensors)


def load_codec(path, discs_rng_seed: int | None = None):
    """Rebuild a Codec (and optionally its discriminators) from a checkpoint."""
    meta, tensors = read_checkpoint(path)
    config = CodecConfig(
        variant=meta["variant"],
        t_stages=int(meta["t_stages"]),
        c_stages=int(meta["c_stages"]),
        seed=int(meta["seed"]),
    )
    codec = Codec(config)
    for name, param in codec.named_parameters().items():
        if name not in tensors:
            raise NetError(f"checkpoint missing tensor {name}")
        if tuple(tensors[name].shape) != param.value.shape:
            raise NetError(f"tensor {name} shape mismatch")
        param.value = tensors[name].astype(param.value.dtype)
    discs = None
    if discs_rng_seed is not None:
        discs = DiscriminatorSet(np.random.default_rng(discs_rng_seed))
        for name, param in discs.named_parameters().items():
            if name in tensors:
                param.value = tensors[name].astype(param.value.dtype)
    return codec, discs, meta
