"""Face/eye dual-encoder gaze estimation with cross-attention fusion, from scratch."""

__version__ = "0.1.0"
