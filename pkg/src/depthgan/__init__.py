"""Semantic-layout to depth-map generation with swin-style transformer stages."""

__version__ = "0.1.0"
