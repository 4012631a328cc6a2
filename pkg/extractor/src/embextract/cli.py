"""CLI: extract --model <id> --layer <n> --in <wav|dir> --out <dir>"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extractor import DEFAULT_LAYER, DEFAULT_MODEL, ExtractError, extract_to_file


def build_parser():
    parser = argparse.ArgumentParser(prog="embextract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="write embedding files for WAV input(s)")
    p.add_argument("--model", default=DEFAULT_MODEL,
                   help="random-wav2vec2-<layers> or hf:<repo-id>")
    p.add_argument("--layer", type=int, default=DEFAULT_LAYER,
                   help="which hidden layer to export")
    p.add_argument("--in", dest="inputs", required=True, help="a WAV file or a directory")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def cmd_extract(args) -> int:
    src = Path(args.inputs)
    wavs = sorted(src.glob("*.wav")) if src.is_dir() else [src]
    if not wavs:
        print(f"error: no WAV files under {src}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for wav in wavs:
        out_path = out_dir / (wav.stem + ".temb")
        emb = extract_to_file(wav, out_path, layer=args.layer, model_id=args.model)
        print(f"{wav.name}: {emb.frames.shape[0]} frames x {emb.frames.shape[1]} -> {out_path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return cmd_extract(args)
    except (ExtractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
