"""Offline speech-embedding extraction for the low-bitrate codec pipeline."""

__version__ = "0.1.0"
