"""Graph-spectral test-time adaptation for point-cloud classification."""

__version__ = "0.1.0"
