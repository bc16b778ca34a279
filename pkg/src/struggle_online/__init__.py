"""Online struggle detection and anticipation from streaming video features."""

__version__ = "0.1.0"
