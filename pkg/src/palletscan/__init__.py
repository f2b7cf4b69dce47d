"""Pallet detection and tracking on 2D laser scans with a small numpy CNN."""

__version__ = "0.1.0"
