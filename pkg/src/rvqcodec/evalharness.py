"""Objective evaluation: SNR and the multi-scale mel distance as a pure
metric, aggregate reporting with t-distribution confidence intervals, WAV
export for external perceptual tools, and the encoder-ablation comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from . import bitstream as bs
from . import trainer as tr
from .losses import LOG_FLOOR, log_term_weight
from .signal import MEL_WINDOWS, Waveform, mel_spectrogram, write_wav

SNR_CAP_DB = 99.0


class EvalError(ValueError):
    pass


@dataclass
class PairMetrics:
    snr_db: float
    mel_distance: float
    bitrate_bps: float = 0.0


@dataclass
class EvalReport:
    rows: list[PairMetrics]

    def aggregate(self) -> dict:
        out = {}
        for field in ("snr_db", "mel_distance", "bitrate_bps"):
            vals = np.array([getattr(r, field) for r in self.rows], dtype=np.float64)
            mean = float(vals.mean()) if len(vals) else float("nan")
            if len(vals) >= 2:
                half = float(scipy_stats.t.ppf(0.975, len(vals) - 1)
                             * vals.std(ddof=1) / np.sqrt(len(vals)))
            else:
                half = float("nan")
            out[field] = {"mean": mean, "ci95": half}
        return out

    def write_csv(self, path) -> None:
        agg = self.aggregate()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["utterance", "snr_db", "mel_distance", "bitrate_bps"])
            for i, r in enumerate(self.rows):
                writer.writerow([i, repr(r.snr_db), repr(r.mel_distance), repr(r.bitrate_bps)])
            writer.writerow(["mean", repr(agg["snr_db"]["mean"]),
                             repr(agg["mel_distance"]["mean"]),
                             repr(agg["bitrate_bps"]["mean"])])
            writer.writerow(["ci95", repr(agg["snr_db"]["ci95"]),
                             repr(agg["mel_distance"]["ci95"]),
                             repr(agg["bitrate_bps"]["ci95"])])


def multiscale_mel_distance(ref: np.ndarray, syn: np.ndarray) -> float:
    """The reconstruction objective evaluated as a plain number: summed
    per-frame L1 of mel power plus sqrt(s/2)-weighted per-frame L2 of the
    floored log, accumulated over analysis windows 64..2048."""
    total = 0.0
    for s in MEL_WINDOWS:
        mr = mel_spectrogram(ref, s).frames
        ms = mel_spectrogram(syn, s).frames
        total += float(np.sum(np.abs(mr - ms)))
        log_diff = np.log(np.maximum(mr, LOG_FLOOR)) - np.log(np.maximum(ms, LOG_FLOOR))
        total += log_term_weight(s) * float(np.sum(np.linalg.norm(log_diff, axis=1)))
    return total


def _match_length(reference: np.ndarray, synthesized: np.ndarray) -> np.ndarray:
    if len(synthesized) >= len(reference):
        return synthesized[: len(reference)]
    return np.pad(synthesized, (0, len(reference) - len(synthesized)))


def eval_pair(reference, synthesized, bitrate_bps: float = 0.0) -> PairMetrics:
    """SNR (capped at 99 dB) and mel distance for one utterance pair; the
    synthesized side is trimmed or zero-padded to the reference length."""
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    syn = synthesized.samples if isinstance(synthesized, Waveform) else np.asarray(synthesized, dtype=np.float64)
    syn = _match_length(ref, syn)
    ref_energy = float(np.sum(ref * ref))
    if ref_energy == 0.0:
        raise EvalError("reference has zero energy")
    err = float(np.sum((ref - syn) ** 2))
    snr = SNR_CAP_DB if err == 0.0 else min(SNR_CAP_DB, 10.0 * np.log10(ref_energy / err))
    return PairMetrics(snr_db=float(snr),
                       mel_distance=multiscale_mel_distance(ref, syn),
                       bitrate_bps=bitrate_bps)


def export_pairs(out_dir, pairs) -> Path:
    """Write ref_i.wav / syn_i.wav plus a manifest CSV; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "reference", "synthesized"])
        for i, (ref, syn) in enumerate(pairs):
            rp, sp = out / f"ref_{i}.wav", out / f"syn_{i}.wav"
            write_wav(rp, ref if isinstance(ref, Waveform) else Waveform(samples=ref))
            write_wav(sp, syn if isinstance(syn, Waveform) else Waveform(samples=syn))
            writer.writerow([i, rp.name, sp.name])
    return manifest


# ---------------------------------------------------------------------------
# running a trained codec over utterances


def _pad_to_superframes(samples: np.ndarray) -> np.ndarray:
    step = 640  # one 25 Hz frame of samples
    extra = (-len(samples)) % step
    return np.pad(samples, (0, extra)) if extra else samples


def codec_round_trip(codec, samples: np.ndarray, embeddings=None):
    """Encode and immediately decode one utterance; returns (synthesized,
    payload bitrate)."""
    from .toydata import project_embeddings

    padded = _pad_to_superframes(np.asarray(samples, dtype=np.float64))
    if embeddings is None:
        embeddings = project_embeddings(padded)
    t_idx, c_idx = codec.encode_arrays(padded, embeddings)
    alloc = bs.BitrateAllocation(
        total_bps=150 * t_idx.shape[1] + 300 * c_idx.shape[1],
        t_stages=t_idx.shape[1], c_stages=c_idx.shape[1])
    stream = bs.build_stream(alloc, t_idx, c_idx, codec.codebook_hash())
    syn = codec.decode_arrays(t_idx, c_idx)
    return syn[: len(samples)], bs.measured_bitrate(stream, stream.duration)


def evaluate_corpus(codec, corpus_dir, limit: int | None = None) -> EvalReport:
    pairs = tr.load_corpus(corpus_dir)
    if limit:
        pairs = pairs[:limit]
    rows = []
    for samples, embeddings in pairs:
        syn, rate = codec_round_trip(codec, samples, embeddings)
        rows.append(eval_pair(samples, syn, bitrate_bps=rate))
    return EvalReport(rows=rows)


ABLATION_VARIANTS = ("transformer", "cnn", "both")


def ablation_experiment(corpus_dir, bitrate: int, steps: int, seed: int,
                        out_dir=None, batch: int = 4, split: str = "even",
                        precision: str = "float32", eval_limit: int | None = None):
    """Train the three encoder designs at one bitrate and rank them by mel
    distance. The ordering is reported, never asserted."""
    results = {}
    for variant in ABLATION_VARIANTS:
        config = tr.TrainConfig(steps=steps, batch=batch, seed=seed, bitrate=bitrate,
                                split=split, variant=variant, precision=precision)
        trainer, history = tr.train(config, corpus_dir)
        report = evaluate_corpus(trainer.codec, corpus_dir, limit=eval_limit)
        results[variant] = {
            "report": report,
            "final_recon": history[-1]["recon"],
            "mean_mel_distance": report.aggregate()["mel_distance"]["mean"],
            "mean_snr_db": report.aggregate()["snr_db"]["mean"],
        }
    ordering = sorted(ABLATION_VARIANTS, key=lambda v: results[v]["mean_mel_distance"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for variant in ABLATION_VARIANTS:
            results[variant]["report"].write_csv(out / f"ablation_{variant}.csv")
        with open(out / "ablation_summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "variant", "mean_mel_distance", "mean_snr_db"])
            for rank, variant in enumerate(ordering, 1):
                writer.writerow([rank, variant,
                                 repr(results[variant]["mean_mel_distance"]),
                                 repr(results[variant]["mean_snr_db"])])
    return ordering, results
