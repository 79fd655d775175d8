"""Train the tangent model with preconditioned SGD."""
from .command import TrainCommand

__all__ = ['TrainCommand']
