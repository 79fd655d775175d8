"""
Tabular outputs: CSV tables and the JSON-lines metrics stream.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import StorageError

logger = logging.getLogger(__name__)

TIMING_KEYS = ("wall_ms",)


def _plain(value):
    """Convert numpy scalars and arrays into JSON/CSV friendly values."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_csv(path, rows: Iterable[Dict], columns: Optional[Sequence[str]] = None) -> Path:
    """
    Write dictionaries as a CSV table.

    Args:
        path: Target file
        rows: One dict per row
        columns: Column order; taken from the first row when omitted

    Returns:
        Path written
    """
    path = Path(path)
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    try:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else _plain(v)) for k, v in row.items()})
    except OSError as e:
        raise StorageError(path, f"cannot write table: {e}")
    logger.debug(f"Wrote {len(rows)} rows to {path}")
    return path


class MetricsWriter:
    """
    JSON-lines metrics file, truncated when opened.

    Every record gets an "event" field naming what produced it. With
    record_time=False the timing fields are dropped, so two runs with the
    same seed write identical files.

    Args:
        path: metrics.jsonl path
        record_time: Keep wall-clock fields
    """

    def __init__(self, path, record_time: bool = True):
        self.path = Path(path)
        self.record_time = record_time
        self.count = 0
        try:
            self._file = open(self.path, "w")
        except OSError as e:
            raise StorageError(self.path, f"cannot open metrics file: {e}")

    def write(self, event: str, **fields) -> None:
        record = {"event": event}
        for key, value in fields.items():
            if not self.record_time and key in TIMING_KEYS:
                continue
            record[key] = _plain(value)
        self._file.write(json.dumps(record, sort_keys=False) + "\n")
        self._file.flush()
        self.count += 1

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path, drop_timing: bool = False) -> List[Dict]:
    """
    Load a metrics file.

    Args:
        path: metrics.jsonl path
        drop_timing: Remove wall-clock fields (for determinism comparisons)

    Returns:
        List of records in file order
    """
    path = Path(path)
    records = []
    try:
        with open(path, "r") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise StorageError(path, f"malformed metrics record: {e}", line=line_no)
                if drop_timing:
                    for key in TIMING_KEYS:
                        record.pop(key, None)
                records.append(record)
    except OSError as e:
        raise StorageError(path, f"cannot read metrics: {e}")
    return records
