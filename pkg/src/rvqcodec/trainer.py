"""End-to-end alternating optimization of the codec and its discriminators
on segment/embedding pairs, with codebooks bootstrapped by k-means on the
first batch. The pretrained-embedding stream enters as fixed file inputs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import engine as eg
from . import losses as ls
from . import nets
from . import quantizer as qz
from .embedfile import EMBED_DIM, EMBED_FRAME_RATE, read_embeddings
from .signal import MEL_WINDOWS, SAMPLE_RATE, read_wav

SEGMENT_SECONDS = 1.28
SEGMENT_SAMPLES = 20480


class TrainerError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-4
    seed: int = 0
    segment_seconds: float = SEGMENT_SECONDS
    bitrate: int = 600
    split: str = "even"
    variant: str = "both"  # both | transformer | cnn
    precision: str = "float32"
    segments_per_file: int = 10
    kmeans_iters: int = 10
    clip_norm: float = 10.0
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainerError("learning rate must be positive")
        if int(round(self.segment_seconds * SAMPLE_RATE)) != SEGMENT_SAMPLES:
            raise TrainerError(f"segment must be {SEGMENT_SECONDS} s ({SEGMENT_SAMPLES} samples)")
        if self.precision not in ("float32", "float64"):
            raise TrainerError("precision must be float32 or float64")
        if self.segments_per_file < 1 or self.segments_per_file > 10:
            raise TrainerError("segments_per_file must be in 1..10")

    @property
    def segment_samples(self) -> int:
        return SEGMENT_SAMPLES

    def allocation(self) -> bs.BitrateAllocation:
        if self.variant == "both":
            return bs.plan_allocation(self.bitrate, self.split)
        stream = "t" if self.variant == "transformer" else "c"
        return bs.single_stream_allocation(self.bitrate, stream)


_CONFIG_FIELD_TYPES = {
    "steps": int, "batch": int, "lr": float, "seed": int,
    "segment_seconds": float, "bitrate": int, "split": str, "variant": str,
    "precision": str, "segments_per_file": int, "kmeans_iters": int,
    "clip_norm": float,
}
_WEIGHT_KEYS = ("adv", "feat", "recon", "quant", "beta")


def parse_config(path) -> TrainConfig:
    """key=value lines; '#' starts a comment. Weight keys: adv feat recon quant beta."""
    kwargs = {}
    weights = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _CONFIG_FIELD_TYPES:
            kwargs[key] = _CONFIG_FIELD_TYPES[key](value)
        elif key in _WEIGHT_KEYS:
            weights[key] = float(value)
        else:
            raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
    if weights:
        kwargs["weights"] = ls.LossWeights(**{k: weights.get(k, getattr(ls.LossWeights(), k))
                                              for k in _WEIGHT_KEYS})
    return TrainConfig(**kwargs)


@dataclass
class Batch:
    segments: np.ndarray  # B x 20480
    embeddings: np.ndarray  # B x 32 x 1024
    keys: list | None = None  # (file index, start sample) per row

    def __post_init__(self):
        if self.embeddings.shape[1] * nets.SAMPLES_PER_EMB_FRAME != self.segments.shape[1]:
            raise TrainerError("embedding frame count does not match the segment length")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def init_adam(params) -> AdamState:
    return AdamState(m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise TrainerError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(m=new_m, v=new_v, t=t)


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class Adam:
    """In-place Adam over DiffNode parameters."""

    def __init__(self, params, lr, clip_norm=0.0):
        self.params = list(params)
        self.lr = lr
        self.clip_norm = clip_norm
        self.state = init_adam([p.value for p in self.params])

    def step(self):
        grads = [p.grad for p in self.params]
        if self.clip_norm:
            clip_global_norm(grads, self.clip_norm)
        new_values, self.state = adam_step(
            [p.value for p in self.params], grads, self.state, self.lr)
        for p, v in zip(self.params, new_values):
            p.value = v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# corpus and batches


def load_corpus(corpus_dir):
    """All (samples, embeddings) pairs; every WAV needs a .temb sibling."""
    corpus_dir = Path(corpus_dir)
    wavs = sorted(corpus_dir.glob("*.wav"))
    if not wavs:
        raise DataError(f"no WAV files under {corpus_dir}")
    pairs = []
    for wav_path in wavs:
        emb_path = wav_path.with_suffix(".temb")
        if not emb_path.exists():
            raise DataError(f"missing embedding file for {wav_path.name}: {emb_path.name}")
        ef = read_embeddings(emb_path)
        if ef.dim != EMBED_DIM or ef.frame_rate != EMBED_FRAME_RATE:
            raise DataError(f"{emb_path}: expected {EMBED_DIM}-dim {EMBED_FRAME_RATE} Hz embeddings")
        wave = read_wav(wav_path)
        pairs.append((wave.samples, ef.embeddings.astype(np.float64)))
    return pairs


def segment_pool(pairs, segments_per_file: int, seed: int):
    """Deterministic (file index, start sample) pool; segment starts align to
    embedding frames; files shorter than one segment contribute nothing."""
    rng = np.random.default_rng(seed)
    pool = []
    step = nets.SAMPLES_PER_EMB_FRAME
    for file_idx, (samples, emb) in enumerate(pairs):
        max_start = min(len(samples), emb.shape[0] * step) - SEGMENT_SAMPLES
        if max_start < 0:
            continue
        starts = np.arange(0, max_start + 1, step)
        take = min(segments_per_file, len(starts))
        chosen = rng.choice(len(starts), size=take, replace=False)
        for s in np.sort(starts[chosen]):
            pool.append((file_idx, int(s)))
    if not pool:
        raise DataError("corpus has no file long enough for one segment")
    return pool


def make_batches(corpus_dir, batch_size: int, segments_per_file: int, seed: int):
    """Endless deterministic stream of batches, reshuffled each epoch."""
    pairs = load_corpus(corpus_dir)
    pool = segment_pool(pairs, segments_per_file, seed)
    rng = np.random.default_rng(seed + 1)
    emb_frames = SEGMENT_SAMPLES // nets.SAMPLES_PER_EMB_FRAME
    while True:
        order = rng.permutation(len(pool))
        for lo in range(0, len(order) - batch_size + 1, batch_size):
            seg = np.zeros((batch_size, SEGMENT_SAMPLES))
            emb = np.zeros((batch_size, emb_frames, EMBED_DIM))
            keys = []
            for row, j in enumerate(order[lo : lo + batch_size]):
                file_idx, start = pool[j]
                samples, embeddings = pairs[file_idx]
                seg[row] = samples[start : start + SEGMENT_SAMPLES]
                f0 = start // nets.SAMPLES_PER_EMB_FRAME
                emb[row] = embeddings[f0 : f0 + emb_frames]
                keys.append((file_idx, start))
            yield Batch(segments=seg, embeddings=emb, keys=keys)


# ---------------------------------------------------------------------------
# the training loop

METRIC_KEYS = ("adv_d", "adv_g", "feat", "recon", "quant", "total_g")


class Trainer:
    def __init__(self, config: TrainConfig):
        self.config = config
        eg.set_default_dtype(np.float32 if config.precision == "float32" else np.float64)
        alloc = config.allocation()
        self.codec = nets.Codec(nets.CodecConfig(
            variant=config.variant, t_stages=alloc.t_stages, c_stages=alloc.c_stages,
            seed=config.seed))
        self.discs = nets.DiscriminatorSet(np.random.default_rng(config.seed + 1))
        self.opt_theta = Adam(self.codec.parameters(), config.lr, config.clip_norm)
        self.opt_phi = Adam(self.discs.parameters(), config.lr, config.clip_norm)
        self.codebooks_ready = False
        self._mel_cache = {}

    # -- codebook bootstrap

    def init_codebooks(self, batch: Batch) -> None:
        cfg = self.config
        if self.codec.config.has_t:
            reduced = (batch.embeddings.reshape(-1, EMBED_DIM)
                       @ self.codec.reduce_w.value.astype(np.float64))
            self._kmeans_cascade(self.codec.t_tables, reduced, cfg.seed + 1000)
        if self.codec.config.has_c:
            with eg.no_grad():
                feats = nets.encode_cnn(self.codec.encoder, batch.segments)
            flat = feats.value.reshape(-1, nets.FEATURE_DIM).astype(np.float64)
            self._kmeans_cascade(self.codec.c_tables, flat, cfg.seed + 2000)
        self.codebooks_ready = True

    def _kmeans_cascade(self, tables, data, seed_base):
        residual = data
        for j, table in enumerate(tables):
            cb = qz.kmeans_init(residual, k=qz.CODEBOOK_SIZE,
                                iters=self.config.kmeans_iters, seed=seed_base + j)
            table.value = cb.entries.astype(table.value.dtype)
            state = qz.RvqState(stages=[qz.Codebook(entries=table.value)])
            residual = residual - qz.rvq_quantize(state, residual).reconstruction.frames

    # -- forward pieces

    def _generator_forward(self, batch: Batch):
        codec = self.codec
        beta = self.config.weights.beta
        streams = []
        q_loss = None
        B = batch.segments.shape[0]
        if codec.config.has_t:
            emb = eg.constant(batch.embeddings)
            reduced = qz.reduce_dim(emb, codec.reduce_w)  # B x F x 64
            n_f = reduced.shape[1]
            flat = eg.reshape(reduced, (B * n_f, nets.FEATURE_DIM))
            t_q, t_loss, _ = qz.quantize_with_loss(flat, codec.t_tables, beta, batch=B)
            t_q = eg.repeat_frames(eg.reshape(t_q, (B, n_f, nets.FEATURE_DIM)), 2, axis=1)
            streams.append(t_q)
            q_loss = t_loss
        if codec.config.has_c:
            feats = nets.encode_cnn(codec.encoder, eg.constant(batch.segments))  # B x F x 64
            n_f = feats.shape[1]
            flat = eg.reshape(feats, (B * n_f, nets.FEATURE_DIM))
            c_q, c_loss, _ = qz.quantize_with_loss(flat, codec.c_tables, beta, batch=B)
            c_q = eg.reshape(c_q, (B, n_f, nets.FEATURE_DIM))
            streams.append(c_q)
            q_loss = c_loss if q_loss is None else eg.add(q_loss, c_loss)
        mix = streams[0] if len(streams) == 1 else eg.concat(streams, axis=2)
        xhat = nets.decode(codec.generator, mix)  # B x T
        return xhat, q_loss

    # -- one alternating step: discriminator update, then generator update

    def _discriminator_update(self, x_const, xhat) -> float:
        """Hinge update of the discriminators; the synthesized side enters
        detached, so codec parameters stay bit-identical. Real and fake
        halves ride through the discriminators as one stacked batch."""
        b = x_const.shape[0]
        both = eg.constant(np.concatenate([x_const.value, xhat.value], axis=0))
        outs = self.discs(both)
        real_outs = [ls.DiscriminatorOutput(logits=eg.narrow(o.logits, 0, 0, b),
                                            feature_maps=o.feature_maps) for o in outs]
        fake_outs = [ls.DiscriminatorOutput(logits=eg.narrow(o.logits, 0, b, b),
                                            feature_maps=o.feature_maps) for o in outs]
        d_loss = ls.adv_discriminator_loss(real_outs, fake_outs)
        eg.backward(d_loss)
        self.opt_phi.step()
        self.opt_phi.zero_grad()
        return float(d_loss.value)

    def _reference_mels(self, batch: Batch):
        """Per-scale reference mel power, cached by segment identity."""
        if batch.keys is None:
            return None
        rows = []
        for row, key in enumerate(batch.keys):
            if key not in self._mel_cache:
                self._mel_cache[key] = ls.reference_mels(batch.segments[row : row + 1])
            rows.append(self._mel_cache[key])
        return {s: (np.concatenate([r[s][0] for r in rows], axis=0),
                    np.concatenate([r[s][1] for r in rows], axis=0))
                for s in MEL_WINDOWS}

    def _generator_update(self, batch, x_const, xhat, q_loss, use_gan):
        """Weighted generator objective; only codec parameters move."""
        if use_gan:
            with eg.no_grad():
                real_ref = self.discs(x_const)
            fake_for_g = self.discs(xhat)
            adv_g = ls.adv_generator_loss(fake_for_g)
            feat = ls.feature_matching_loss(real_ref, fake_for_g)
        else:
            adv_g = eg.constant(0.0)
            feat = eg.constant(0.0)
        recon = ls.reconstruction_loss(batch.segments, xhat, ref_mels=self._reference_mels(batch))
        parts = {"adv": adv_g, "feat": feat, "recon": recon, "quant": q_loss}
        total = ls.total_generator_loss(parts, self.config.weights)
        eg.backward(total)
        self.opt_theta.step()
        self.opt_theta.zero_grad()
        self.opt_phi.zero_grad()  # discard generator-pass gradients on the discriminators
        return {
            "adv_g": float(adv_g.value),
            "feat": float(feat.value),
            "recon": float(recon.value),
            "quant": float(q_loss.value),
            "total_g": float(total.value),
        }

    def train_step(self, batch: Batch):
        if not self.codebooks_ready:
            self.init_codebooks(batch)
        w = self.config.weights
        use_gan = w.adv > 0 or w.feat > 0
        x_const = eg.constant(batch.segments)
        xhat, q_loss = self._generator_forward(batch)
        d_val = self._discriminator_update(x_const, xhat) if use_gan else 0.0
        metrics = self._generator_update(batch, x_const, xhat, q_loss, use_gan)
        metrics["adv_d"] = d_val
        bad = [k for k, v in metrics.items() if not np.isfinite(v)]
        if bad:
            raise TrainerError(f"non-finite loss components {bad}: {metrics}")
        return metrics


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step",) + METRIC_KEYS)
        for i, row in enumerate(rows, 1):
            writer.writerow([i] + [repr(row[k]) for k in METRIC_KEYS])


def train(config: TrainConfig, corpus_dir, ckpt_path=None, metrics_path=None,
          log_every: int = 0):
    """Full toy training run; returns the per-step metrics list."""
    trainer = Trainer(config)
    batches = make_batches(corpus_dir, config.batch, config.segments_per_file,
                           config.seed + 2)
    history = []
    for step in range(1, config.steps + 1):
        metrics = trainer.train_step(next(batches))
        history.append(metrics)
        if log_every and step % log_every == 0:
            print(f"step {step}: " + " ".join(f"{k}={metrics[k]:.4f}" for k in METRIC_KEYS))
    if metrics_path:
        write_metrics_csv(metrics_path, history)
    if ckpt_path:
        nets.save_codec(ckpt_path, trainer.codec, trainer.discs, extra_meta={
            "bitrate": config.bitrate, "split": config.split, "steps": config.steps,
        })
    return trainer, history
