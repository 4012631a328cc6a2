"""Low-bitrate speech codec built on dual-stream residual vector quantization."""

__version__ = "0.1.0"
