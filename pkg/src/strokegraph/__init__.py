"""Stroke-based sketch graphs, gated message passing, graph attacks and generation."""

__version__ = "0.1.0"
