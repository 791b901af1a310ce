"""Behavior-grounded lane representation learning on synthetic roadside scenes."""

__version__ = "0.1.0"
