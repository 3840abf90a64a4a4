"""Disentangled multi-modality image translation and encoder-reuse segmentation."""

__version__ = "0.1.0"
