"""Prune a small language model into sparse variants, fine-tune them federatedly, recombine."""

__version__ = "0.1.0"
