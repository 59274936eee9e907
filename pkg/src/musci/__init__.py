"""Multi-source conformal prediction for missing target outcomes."""

__version__ = "0.1.0"
