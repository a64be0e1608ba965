"""Differentiable building blocks: attention, convolution, normalization."""
from . import functional
from .functional import GLOBAL, AttentionParams, Window, msa_forward

__all__ = ["functional", "GLOBAL", "AttentionParams", "Window", "msa_forward"]
