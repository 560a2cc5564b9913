"""Fixation-conditioned scene generation and metamer-experiment toolkit."""

__version__ = "0.1.0"
