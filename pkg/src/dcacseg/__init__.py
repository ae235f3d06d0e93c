"""Histopathology tumor segmentation with domain and content adaptive convolutions."""

__version__ = "0.1.0"
