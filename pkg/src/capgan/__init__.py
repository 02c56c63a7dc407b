"""Content-guided style-based image generation with frequency-selective encoding."""

__version__ = "0.1.0"
