"""Multi-frame object detection with per-channel temporal feature fusion."""

__version__ = "0.1.0"
