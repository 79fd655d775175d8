"""Oracle verification suite."""
from .command import VerifyCommand

__all__ = ['VerifyCommand']
