"""Decoupled defogging pre-training and foggy-scene segmentation fine-tuning on toy scenes."""

__version__ = "0.1.0"
