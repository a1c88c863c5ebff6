"""Desk-scale toolkit for adapting a small language model to a new tokenizer and depth."""

__version__ = "0.1.0"
