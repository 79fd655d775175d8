"""Robustness of linearized training across (eta, momentum, batch) at equal ELR."""
from .command import ElrSweepCommand

__all__ = ['ElrSweepCommand']
