"""Temporally-aware 3-D residual diffusion for longitudinal volume progression."""

__version__ = "0.1.0"
