"""Command-line entry point: train, encode, decode, eval, verify, make-corpus.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
The seed falls back to the RVQ_SEED environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import evalharness as ev
from . import nets
from . import toydata
from . import trainer as tr
from .embedfile import EmbedFileError, read_embeddings
from .quantizer import QuantizerError
from .signal import SignalError, Waveform, read_wav, write_wav
from .verify import run_verification

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

DATA_ERRORS = (tr.DataError, tr.TrainerError, bs.BitstreamError, SignalError,
               EmbedFileError, nets.NetError, QuantizerError, ev.EvalError,
               FileNotFoundError, IsADirectoryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _seed_value(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("RVQ_SEED", "0"))


def build_parser() -> _Parser:
    parser = _Parser(prog="rvqcodec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec on a corpus of WAV + embedding pairs")
    p.add_argument("--config", required=True, help="key=value training config file")
    p.add_argument("--corpus", required=True, help="directory of .wav/.temb pairs")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", help="per-step loss CSV (default: <out>.metrics.csv)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("encode", help="encode one utterance into a packed stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bitrate", type=int, required=True)
    p.add_argument("--split", choices=("even", "third"), default="even")
    p.add_argument("--in", dest="infile", required=True, help="16 kHz mono WAV")
    p.add_argument("--emb", help="embedding file for the transformer stream")
    p.add_argument("--out", required=True, help="stream output path")

    p = sub.add_parser("decode", help="synthesize a waveform from a packed stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="round-trip a corpus and report SNR / mel distance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--export", action="store_true", help="also write ref/syn WAV pairs")

    p = sub.add_parser("verify", help="run the gradient/quantizer/bitstream property suite")
    p.add_argument("--inject-fault", help="test hook: corrupt a named path", default=None)

    p = sub.add_parser("make-corpus", help="synthesize a toy training corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, default=20)
    p.add_argument("--seed", type=int)

    return parser


def cmd_train(args) -> int:
    config = tr.parse_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise tr.DataError(f"corpus directory not found: {corpus}")
    metrics = args.metrics or f"{args.out}.metrics.csv"
    tr.train(config, corpus, ckpt_path=args.out, metrics_path=metrics,
             log_every=args.log_every)
    print(f"checkpoint written to {args.out}")
    print(f"metrics written to {metrics}")
    return EXIT_OK


def _allocation_for(codec: nets.Codec, bitrate: int, split: str) -> bs.BitrateAllocation:
    if codec.config.variant == "both":
        alloc = bs.plan_allocation(bitrate, split)
    else:
        stream = "t" if codec.config.variant == "transformer" else "c"
        alloc = bs.single_stream_allocation(bitrate, stream)
    if (alloc.t_stages, alloc.c_stages) != (codec.config.t_stages, codec.config.c_stages):
        raise tr.DataError(
            f"allocation ({alloc.t_stages},{alloc.c_stages}) does not match the "
            f"checkpoint's cascade ({codec.config.t_stages},{codec.config.c_stages})")
    return alloc


def cmd_encode(args) -> int:
    codec, _, _ = nets.load_codec(args.ckpt)
    alloc = _allocation_for(codec, args.bitrate, args.split)
    wave = read_wav(args.infile)
    samples = ev._pad_to_superframes(wave.samples)
    n_t = len(samples) // nets.SAMPLES_PER_EMB_FRAME
    embeddings = None
    if codec.config.has_t:
        if not args.emb:
            raise tr.DataError("this codec needs the transformer stream: pass --emb <file>")
        ef = read_embeddings(args.emb)
        if abs(ef.frames - n_t) > 1:
            raise tr.DataError(
                f"embedding/wav frame mismatch: {ef.frames} embedding frames for "
                f"{n_t} audio frames")
        emb = ef.embeddings.astype(np.float64)
        if ef.frames < n_t:
            emb = np.vstack([emb, emb[-1:]])
        embeddings = emb[:n_t]
    t_idx, c_idx = codec.encode_arrays(samples, embeddings)
    stream = bs.build_stream(alloc, t_idx, c_idx, codec.codebook_hash())
    Path(args.out).write_bytes(bs.serialize_stream(stream))
    rate = bs.measured_bitrate(stream, stream.duration)
    print(f"{args.out}: {stream.payload_bits} payload bits over {stream.duration:.2f} s "
          f"-> {rate:.1f} bps")
    return EXIT_OK


def cmd_decode(args) -> int:
    codec, _, _ = nets.load_codec(args.ckpt)
    stream = bs.parse_stream(Path(args.infile).read_bytes())
    expect = codec.codebook_hash()
    if stream.codebook_hash != expect:
        raise tr.DataError(
            f"codebook hash mismatch: stream {stream.codebook_hash.hex()} vs "
            f"checkpoint {expect.hex()}")
    if (stream.allocation.t_stages, stream.allocation.c_stages) != (
            codec.config.t_stages, codec.config.c_stages):
        raise tr.DataError("stream stage counts do not match the checkpoint")
    wave = codec.decode_arrays(stream.t_indices, stream.c_indices)
    write_wav(args.out, Waveform(samples=np.clip(wave, -1.0, 1.0)))
    print(f"{args.out}: {len(wave)} samples ({len(wave) / 16000:.2f} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    codec, _, _ = nets.load_codec(args.ckpt)
    report = ev.evaluate_corpus(codec, args.corpus, limit=args.limit)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    if args.export:
        pairs = []
        for samples, embeddings in tr.load_corpus(args.corpus)[: args.limit]:
            syn, _ = ev.codec_round_trip(codec, samples, embeddings)
            pairs.append((samples, np.clip(syn, -1.0, 1.0)))
        ev.export_pairs(out, pairs)
    agg = report.aggregate()
    print(f"report written to {out / 'report.csv'}")
    print(f"mean snr {agg['snr_db']['mean']:.2f} dB, "
          f"mean mel distance {agg['mel_distance']['mean']:.1f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    faults = {args.inject_fault} if args.inject_fault else frozenset()
    results = run_verification(faults=faults)
    failed = [name for name, ok, _ in results if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_make_corpus(args) -> int:
    paths = toydata.make_toy_corpus(args.out, n_utterances=args.utterances,
                                    seed=_seed_value(args))
    print(f"wrote {len(paths)} utterances (WAV + embeddings) under {args.out}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "make-corpus": cmd_make_corpus,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
