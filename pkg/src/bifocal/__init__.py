"""Table-to-text generation with fused bifocal attention and gated orthogonalization."""

__version__ = "0.1.0"
