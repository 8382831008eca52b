"""Noise-robust classification via neighborhood label-distribution targets,
dual-view feature learning, and cross-view contrastive training."""

__version__ = "0.1.0"
