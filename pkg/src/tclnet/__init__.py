"""Hybrid Transformer-CNN CSI feedback with LM/FM hybrid lossless coding."""

__version__ = "0.1.0"
