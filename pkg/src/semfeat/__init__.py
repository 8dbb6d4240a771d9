"""Semantic multi-task keypoints, descriptors and segmentation with a cross-task attention mixer."""

__version__ = "0.1.0"
