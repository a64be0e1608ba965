"""Desk-scale laboratory for comparing convolutions and multi-head self-attention."""

__version__ = "0.1.0"
