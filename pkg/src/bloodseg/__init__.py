"""Whole-slide blood cell semantic segmentation with a from-scratch
convolutional encoder-decoder."""

__version__ = "0.1.0"
