"""Ranking tablestore facts to regenerate explanations for science QA pairs."""

__version__ = "0.1.0"
