"""Patch-hiding-attack defense for object detectors with per-object certification."""
__version__ = "0.1.0"
