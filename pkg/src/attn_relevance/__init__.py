"""Attention relevancy propagation for self-, co- and encoder-decoder attention."""

__version__ = "0.1.0"
