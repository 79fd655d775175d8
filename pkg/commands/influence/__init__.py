"""Leave-one-out influence of every training sample."""
from .command import InfluenceCommand

__all__ = ['InfluenceCommand']
