"""Semi-supervised joint segmentation and classification with dual-threshold pseudo-labels."""

__version__ = "0.1.0"
