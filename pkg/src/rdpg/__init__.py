"""Recurrent deterministic policy gradient for partially observable locomotion."""

__version__ = "0.1.0"
