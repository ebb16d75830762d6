"""Small-object detector with multi-scale region proposals and cross-level
position-sensitive pooling, built on a minimal numpy autodiff core."""

__version__ = "0.1.0"
