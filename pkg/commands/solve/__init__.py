"""Closed-form optimum of the linearized problem."""
from .command import SolveCommand

__all__ = ['SolveCommand']
