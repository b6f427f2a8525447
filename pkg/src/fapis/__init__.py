"""Few-shot anchor-free part-based instance segmentation on synthetic shape episodes."""

__version__ = "0.1.0"
