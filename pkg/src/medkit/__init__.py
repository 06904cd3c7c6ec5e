"""Data-production, packing and evaluation kernels for medical multimodal models."""

__version__ = "0.1.0"
