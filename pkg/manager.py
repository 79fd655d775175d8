"""
Experiment manager for the lqf command line.

Owns the lifecycle of one command run: output directory, config snapshot,
metrics stream, and setup/run/cleanup of the command. Also runs grids of
independent cells in separate sub-directories.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Type

from commands import ExperimentCommand
from engine.errors import ContractError, LqfError, StorageError
from engine.storage import MetricsWriter

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"


class ExperimentManager:
    """
    Runs experiment commands.

    Handles:
    - Command registration
    - Output directory and config snapshot
    - Metrics file lifecycle
    - Error logging at the command boundary
    """

    def __init__(self, config):
        """
        Initialize the manager.

        Args:
            config: Resolved RunConfig
        """
        self.config = config
        self.available_commands: Dict[str, Type[ExperimentCommand]] = {}

    def register_command(self, name: str, command_class: Type[ExperimentCommand]):
        self.available_commands[name] = command_class
        logger.debug(f"Registered command: {name}")

    def prepare_out_dir(self) -> Path:
        out_dir = self.config.out_dir
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(out_dir, f"cannot create output directory: {e}")
        return out_dir

    def execute(self, name: str) -> Dict:
        """
        Run one command to completion.

        The config snapshot is written before the command starts, and
        cleanup() runs whatever happens.

        Args:
            name: Registered command name

        Returns:
            The command's summary dictionary
        """
        if name not in self.available_commands:
            raise ContractError(f"unknown command '{name}'")
        out_dir = self.prepare_out_dir()
        self.config.write_snapshot(out_dir)

        metrics = MetricsWriter(out_dir / METRICS_NAME, record_time=self.config["run.record_time"])
        command = self.available_commands[name](self.config, out_dir, metrics)
        try:
            logger.info(f"Starting command: {name} (seed={self.config.seed}, out={out_dir})")
            command.setup()
            summary = command.run()
            metrics.write("summary", command=name, **summary)
            logger.info(f"Command {name} finished")
            return summary
        except LqfError as e:
            logger.error(f"Command {name} failed: {e}")
            metrics.write("error", command=name, error=type(e).__name__, message=str(e))
            raise
        finally:
            try:
                command.cleanup()
            except Exception as e:
                logger.error(f"Error cleaning up command {name}: {e}")
            metrics.close()


def _run_cell(task: Callable, cell: Dict, cell_dir: Path) -> Dict:
    cell_dir.mkdir(parents=True, exist_ok=True)
    return task(cell, cell_dir)


def run_grid(task: Callable[[Dict, Path], Dict], cells: List[Dict], out_dir,
             workers: int = 1) -> List[Dict]:
    """
    Run independent grid cells, each in its own out_dir/grid-<i> directory.

    Args:
        task: Module-level function (cell, cell_dir) -> result; must be
              picklable when workers > 1
        cells: Parameter dictionaries, one per cell
        out_dir: Parent directory of the cell directories
        workers: Process count; 1 runs the cells in order in this process

    Returns:
        Results in cell order
    """
    out_dir = Path(out_dir)
    dirs = [out_dir / f"grid-{i}" for i in range(len(cells))]
    logger.info(f"Running grid of {len(cells)} cell(s) with {workers} worker(s)")
    if workers <= 1:
        return [_run_cell(task, cell, d) for cell, d in zip(cells, dirs)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell, task, cell, d) for cell, d in zip(cells, dirs)]
        return [f.result() for f in futures]


def grid_cells(**axes) -> List[Dict]:
    """Cartesian product of named value lists, in row-major order."""
    cells: List[Dict] = [{}]
    for key, values in axes.items():
        cells = [{**cell, key: value} for cell in cells for value in values]
    return cells


def best_cell(results: List[Dict], key: str) -> Optional[Dict]:
    """Result with the smallest `key`; ties keep the earliest cell."""
    best = None
    for result in results:
        if best is None or result[key] < best[key]:
            best = result
    return best
