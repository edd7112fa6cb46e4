"""Weakly supervised video captioning by progressive pseudo-sentence refinement."""

__version__ = "0.1.0"
