"""Transformer encoder vs. a discretised information-flow PDE, with the
statistics used to compare them."""

__version__ = "0.1.0"
