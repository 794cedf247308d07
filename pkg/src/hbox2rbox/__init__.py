"""Recover rotated boxes from horizontal-box supervision."""
__version__ = "0.1.0"
