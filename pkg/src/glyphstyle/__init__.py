"""Few-shot glyph style transfer with cross-attention style aggregation."""

__version__ = "0.1.0"
