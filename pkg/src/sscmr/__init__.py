"""Semi-supervised cross-modal retrieval in label space."""

__version__ = "0.1.0"
