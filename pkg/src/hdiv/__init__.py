"""Post-selection inference for high-dimensional linear IV models."""

__version__ = "0.1.0"
