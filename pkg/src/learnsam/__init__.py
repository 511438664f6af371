"""Localised expert ensembles with split-and-merge, trained by trust-region policy search."""

__version__ = "0.1.0"
