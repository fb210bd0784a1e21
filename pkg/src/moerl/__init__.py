"""Mixture-of-experts layers for value-based deep RL networks."""

__version__ = "0.1.0"
