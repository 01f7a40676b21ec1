"""morphflow: bidirectional coarse-to-fine point cloud transformation."""

__version__ = "0.1.0"
