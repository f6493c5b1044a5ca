"""Decoupled end-to-end speech recognition with a replaceable internal language model."""

__version__ = "0.1.0"
