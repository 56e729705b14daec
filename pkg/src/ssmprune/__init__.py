"""Pruning toolkit for Mamba-2 state-space language models."""

__version__ = "0.1.0"
