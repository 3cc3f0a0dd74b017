"""Serial-section flow-matching expression imputation."""

__version__ = "0.1.0"
