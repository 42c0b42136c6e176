"""Polarimetric motion sensing with vector beams: forward model, detectors, inference."""

__version__ = "0.1.0"
