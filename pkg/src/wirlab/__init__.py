"""Watermark identity-leakage and certified-robustness laboratory."""
__version__ = "0.1.0"
