"""RF interference rejection: signal generation, mixing, separators, metrics and streaming."""

__version__ = "0.1.0"
