"""Incomplete-view CT laboratory: simulation, prompted contextual transformer, training."""

__version__ = "0.1.0"
