"""Psychometric probing of chat language models under perspective inductions."""

__version__ = "0.1.0"
