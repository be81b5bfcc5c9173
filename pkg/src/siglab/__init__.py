"""Multi-source domain adaptation lab with subspace-identifiability metrics."""

__version__ = "0.1.0"
