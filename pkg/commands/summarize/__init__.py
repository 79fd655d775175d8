"""Dataset summarization by F-SI."""
from .command import SummarizeCommand

__all__ = ['SummarizeCommand']
