"""Matryoshka query transformer: elastic visual-token budgets at desk scale."""

__version__ = "0.1.0"
