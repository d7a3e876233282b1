"""Learned low-rank representation decomposition and LRRNet image fusion."""

__version__ = "0.1.0"
