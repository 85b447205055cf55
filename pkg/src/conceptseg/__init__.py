"""Set-level concept segmentation on a synthetic shape world."""

__version__ = "0.1.0"
