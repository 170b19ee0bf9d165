"""Regime-switching LQ control and mean-variance asset-liability management."""

__version__ = "0.1.0"
