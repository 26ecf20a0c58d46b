"""Multi-band PolSAR fusion classification with cross-band interaction and graph aggregation."""

__version__ = "0.1.0"
