"""Training objectives: hinge adversarial pair, feature matching, multi-scale
mel reconstruction, and the codebook/commitment quantization loss, combined
into the weighted generator objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import signal as sig

NUM_DISCRIMINATORS = 4
LOG_FLOOR = 1e-5


class LossError(ValueError):
    pass


@dataclass
class DiscriminatorOutput:
    """Final logits over time plus the intermediate feature maps.

    logits: [T] or [B, T]; feature maps: [C, T_l] or [B, C, T_l] each.
    """

    logits: eg.DiffNode
    feature_maps: list[eg.DiffNode] = field(default_factory=list)

    def __post_init__(self):
        if self.logits.shape[-1] < 1:
            raise LossError("discriminator produced empty logits")
        if not self.feature_maps:
            raise LossError("discriminator produced no feature maps")


@dataclass
class LossWeights:
    adv: float = 1.0
    feat: float = 100.0
    recon: float = 1.0
    quant: float = 0.4
    # commitment weight: the reconstruction term is an unnormalized sum over
    # frames and scales, so the commitment side needs a matching magnitude to
    # anchor encoder outputs to the codebooks at this corpus size
    beta: float = 300.0

    def __post_init__(self):
        if min(self.adv, self.feat, self.recon, self.quant, self.beta) < 0:
            raise LossError("loss weights must be nonnegative")


def _require_discs(outs, what):
    if len(outs) != NUM_DISCRIMINATORS:
        raise LossError(f"{what}: expected {NUM_DISCRIMINATORS} discriminator outputs, got {len(outs)}")


def adv_generator_loss(disc_outs: list[DiscriminatorOutput]) -> eg.DiffNode:
    """Hinge generator objective: mean over discriminators of
    mean_t max(0, 1 - logit) on synthesized speech."""
    _require_discs(disc_outs, "adv_generator_loss")
    total = None
    for out in disc_outs:
        term = eg.mean(eg.relu(1.0 - out.logits))
        total = term if total is None else eg.add(total, term)
    return eg.mul(total, 1.0 / NUM_DISCRIMINATORS)


def adv_discriminator_loss(real_outs, fake_outs) -> eg.DiffNode:
    """Hinge discriminator objective: margins max(0, 1-real) + max(0, 1+fake)."""
    _require_discs(real_outs, "adv_discriminator_loss")
    if len(fake_outs) != len(real_outs):
        raise LossError("real/fake discriminator counts differ")
    total = None
    for real, fake in zip(real_outs, fake_outs):
        term = eg.add(eg.mean(eg.relu(1.0 - real.logits)), eg.mean(eg.relu(1.0 + fake.logits)))
        total = term if total is None else eg.add(total, term)
    return eg.mul(total, 1.0 / NUM_DISCRIMINATORS)


def feature_matching_loss(real_outs, fake_outs) -> eg.DiffNode:
    """L1 distance between real and synthesized feature maps, normalized per
    discriminator count, layer count, and each map's time length."""
    _require_discs(real_outs, "feature_matching_loss")
    if len(fake_outs) != len(real_outs):
        raise LossError("real/fake discriminator counts differ")
    total = None
    for real, fake in zip(real_outs, fake_outs):
        layers = len(real.feature_maps)
        if layers != len(fake.feature_maps):
            raise LossError("real/fake layer counts differ")
        for rm, fm in zip(real.feature_maps, fake.feature_maps):
            if rm.shape != fm.shape:
                raise LossError(f"feature map shapes differ: {rm.shape} vs {fm.shape}")
            t_len = rm.shape[-1]
            batch = rm.shape[0] if rm.ndim == 3 else 1
            norm = 1.0 / (NUM_DISCRIMINATORS * layers * t_len * batch)
            term = eg.mul(eg.l1_norm(eg.sub(rm, fm)), norm)
            total = term if total is None else eg.add(total, term)
    return total


def log_term_weight(window_length: int) -> float:
    """Weight of the log-mel term at one analysis scale."""
    return float(np.sqrt(window_length / 2.0))


def _as_batched_node(x, dtype=None) -> eg.DiffNode:
    if isinstance(x, sig.Waveform):
        x = x.samples
    node = x if isinstance(x, eg.DiffNode) else eg.constant(np.asarray(x), dtype)
    if node.ndim == 1:
        node = eg.reshape(node, (1,) + node.shape)
    return node


def reference_mels(x, dtype=None) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Precompute the constant reference-side (mel power, floored log) at
    every scale (reusable across steps when the same segments recur)."""
    node = _as_batched_node(x, dtype)
    out = {}
    with eg.no_grad():
        for s in sig.MEL_WINDOWS:
            mel = sig.mel_power_node(node, s).value
            out[s] = (mel, np.log(np.maximum(mel, LOG_FLOOR)))
    return out


def reconstruction_loss(x, xhat: eg.DiffNode, ref_mels: dict | None = None) -> eg.DiffNode:
    """Multi-scale mel distance: per analysis window s in {64..2048}, the
    summed per-frame L1 of mel power plus sqrt(s/2) times the summed
    per-frame L2 of floored log mel power; averaged over the batch.

    A reference passed as a plain array or Waveform is treated as a constant
    (its mel branch skips graph construction); pass a DiffNode to make the
    reference side differentiable too. `ref_mels` (from
    :func:`reference_mels`) short-circuits the constant branch entirely.
    """
    x_is_node = isinstance(x, eg.DiffNode)
    xhat = _as_batched_node(xhat)
    x = _as_batched_node(x, xhat.dtype)
    if x.shape != xhat.shape:
        raise LossError(f"waveform lengths differ: {x.shape} vs {xhat.shape}")
    if x.shape[-1] < max(sig.MEL_WINDOWS):
        raise LossError(f"signal shorter than {max(sig.MEL_WINDOWS)} samples")
    batch = x.shape[0]
    total = None
    for s in sig.MEL_WINDOWS:
        if ref_mels is not None:
            mel, logmel = ref_mels[s]
            mel_x = eg.constant(mel, xhat.dtype)
            log_x = eg.constant(logmel, xhat.dtype)
        else:
            if x_is_node:
                mel_x = sig.mel_power_node(x, s)
            else:
                with eg.no_grad():
                    mel_x = sig.mel_power_node(x, s)
            log_x = eg.log(eg.maximum(mel_x, LOG_FLOOR))
        mel_y = sig.mel_power_node(xhat, s)
        diff = eg.sub(mel_x, mel_y)
        l1 = eg.l1_norm(diff)
        log_diff = eg.sub(log_x, eg.log(eg.maximum(mel_y, LOG_FLOOR)))
        l2 = eg.sum_(eg.l2_norm(log_diff, axis=-1))
        term = eg.add(l1, eg.mul(l2, log_term_weight(s)))
        total = term if total is None else eg.add(total, term)
    return eg.mul(total, 1.0 / batch)


def quantization_loss(enc_out: eg.DiffNode, e: eg.DiffNode, beta: float) -> eg.DiffNode:
    """Codebook term ||sg[E(x)] - e||^2 plus beta * commitment term
    ||sg[e] - E(x)||^2, summed over the feature sequence.

    Gradient reaches `e` only through the first term (exactly 2(e - E(x)))
    and `enc_out` only through the second (exactly 2*beta*(E(x) - e)).
    """
    if enc_out.shape != e.shape:
        raise LossError(f"shape mismatch: {enc_out.shape} vs {e.shape}")
    d1 = eg.sub(eg.stop_gradient(enc_out), e)
    d2 = eg.sub(eg.stop_gradient(e), enc_out)
    return eg.add(eg.sum_(eg.mul(d1, d1)), eg.mul(eg.sum_(eg.mul(d2, d2)), beta))


def total_generator_loss(parts: dict, weights: LossWeights) -> eg.DiffNode:
    """1.0*adv + 100.0*feat + 1.0*recon + 0.4*quant with the given weights."""
    try:
        pieces = [
            eg.mul(parts["adv"], weights.adv),
            eg.mul(parts["feat"], weights.feat),
            eg.mul(parts["recon"], weights.recon),
            eg.mul(parts["quant"], weights.quant),
        ]
    except KeyError as missing:
        raise LossError(f"missing loss component {missing}") from None
    total = pieces[0]
    for p in pieces[1:]:
        total = eg.add(total, p)
    return total
