"""LLM-based pseudo-label filtering for noisy student training on code-switching ASR data."""

__version__ = "0.1.0"
