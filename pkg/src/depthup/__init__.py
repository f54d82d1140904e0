"""Temporal depth upsampling: reconstruct high-rate depth from a slow depth
camera and a fast color camera."""

__version__ = "0.1.0"
