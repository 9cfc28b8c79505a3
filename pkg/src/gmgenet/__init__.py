"""Grad-CAM guided VOI extraction and 3D DenseNet classification of CT volumes."""

__version__ = "0.1.0"
