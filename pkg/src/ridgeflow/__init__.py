"""Density ridge extraction by subspace-constrained ascent of a ridgeness function."""

__version__ = "0.1.0"
