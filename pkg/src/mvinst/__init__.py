"""Joint multi-view geometry estimation and query-based 3D instance segmentation."""

__version__ = "0.1.0"
