"""Ensemble Kalman inversion for time-fractional diffusion with multiscale
reduced-order forward models and sparse polynomial chaos surrogates."""

__version__ = "0.1.0"
