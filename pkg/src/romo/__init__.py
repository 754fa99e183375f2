"""Retrieval-enhanced offline model-based optimization with constrained designs."""

__version__ = "0.1.0"
