"""Variable-rate learned point cloud codec."""

__version__ = "0.1.0"
