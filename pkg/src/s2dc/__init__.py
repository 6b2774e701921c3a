"""Structure-aware self-supervised learning on synthetic 3D volumes."""

__version__ = "0.1.0"
