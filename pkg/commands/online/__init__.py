"""Incremental (online) LQF against the re-solved paragon."""
from .command import OnlineCommand

__all__ = ['OnlineCommand']
