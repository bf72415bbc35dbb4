"""Crater-landmark rover localization: terrain synthesis, detection and filtering."""

__version__ = "0.1.0"
