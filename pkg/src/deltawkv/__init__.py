"""Delta-rule linear-attention super-resolution for single-channel images."""

__version__ = "0.1.0"
