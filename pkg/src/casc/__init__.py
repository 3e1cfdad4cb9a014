"""Condition-aware semantic image transmission over simulated AWGN channels."""

__version__ = "0.1.0"
