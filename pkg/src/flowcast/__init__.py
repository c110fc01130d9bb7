"""Occupancy-density forecasting with causal encoders and normalizing flows."""

__version__ = "0.1.0"
