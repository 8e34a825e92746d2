"""Stochastic-gradient statistical inference via approximate Newton steps."""

__version__ = "0.1.0"
