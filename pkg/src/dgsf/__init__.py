"""Dense-grid scene flow: pixelized point clouds, kernel grouping, warping-projection cost volume."""

__version__ = "0.1.0"
