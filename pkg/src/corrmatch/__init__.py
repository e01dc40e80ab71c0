"""Semi-supervised segmentation with relaxed thresholds and correlation matching, at desk scale."""

__version__ = "0.1.0"
