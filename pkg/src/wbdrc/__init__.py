"""Whole-body disturbance-rejection control for legged robots, with a built-in simulator."""

__version__ = "0.1.0"
