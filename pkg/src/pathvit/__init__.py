"""Vision transformers viewed as an ensemble of residual paths."""

__version__ = "0.1.0"
