"""LiDAR-camera fusion segmentation with learned offset rectification."""

__version__ = "0.1.0"
