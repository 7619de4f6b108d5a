"""Evaluation and refinement tools for video referring-expression grounding."""

__version__ = "0.1.0"
