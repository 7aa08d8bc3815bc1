"""Stiefel-constrained subspace prototypes with proximal rank calibration."""
__version__ = "0.1.0"
