"""Referring-expression grounding in short videos with semantic attention and
co-grounding, built on a small float64 reverse-mode autodiff.
"""

__version__ = "0.1.0"
