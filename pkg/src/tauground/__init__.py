"""Adaptive multiple-timescale recurrent networks for crossmodal language grounding."""

__version__ = "0.1.0"
