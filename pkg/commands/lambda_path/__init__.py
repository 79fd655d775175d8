"""Warm-started weight-decay path."""
from .command import LambdaPathCommand

__all__ = ['LambdaPathCommand']
