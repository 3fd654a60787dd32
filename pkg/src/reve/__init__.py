"""REVE-style EEG foundation-model training stack."""

__version__ = "0.1.0"
