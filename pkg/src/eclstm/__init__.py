"""Convolution-gated LSTMs for remaining-useful-life regression, with a BOHB search driver."""

__version__ = "0.1.0"
