"""Low-shot comparison of LQF and nonlinear fine-tuning."""
from .command import KshotCommand

__all__ = ['KshotCommand']
