"""Functional sample information ranking."""
from .command import FsiCommand

__all__ = ['FsiCommand']
