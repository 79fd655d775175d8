"""Ablation of the loss, the preconditioner, the activation and the linearized span."""
from .command import AblationCommand

__all__ = ['AblationCommand']
