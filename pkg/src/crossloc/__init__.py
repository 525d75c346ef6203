"""Cross-modal place recognition: images and LiDAR sub-maps in one embedding space."""

__version__ = "0.1.0"
