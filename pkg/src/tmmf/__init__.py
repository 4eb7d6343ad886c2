"""Temporal multi-modal fusion for single-stage continuous gesture recognition."""

__version__ = "0.1.0"
