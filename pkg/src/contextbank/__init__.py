"""Memory-bank attention for per-camera temporal object detection."""

__version__ = "0.1.0"
