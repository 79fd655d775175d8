"""
File formats of the engine.

Binary files (weights, problems, K-FAC factors) are little-endian with a
four-byte magic and a u32 version. Tables are CSV; metrics are JSON lines.
"""

from .binary import (
    load_kfac,
    load_params,
    load_problem,
    load_spec,
    save_kfac,
    save_params,
    save_problem,
    save_spec,
)
from .tables import MetricsWriter, read_metrics, write_csv

__all__ = [
    "MetricsWriter",
    "load_kfac",
    "load_params",
    "load_problem",
    "load_spec",
    "read_metrics",
    "save_kfac",
    "save_params",
    "save_problem",
    "save_spec",
    "write_csv",
]
