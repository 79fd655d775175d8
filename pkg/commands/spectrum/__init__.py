"""Eigenvalue spectrum of the linearized Hessian."""
from .command import SpectrumCommand

__all__ = ['SpectrumCommand']
