"""
ELR sweep command: linearized training depends on (eta, momentum, batch size)
mostly through the effective learning rate ELR = eta / ((1 - m) b).

For every ELR in elr.values one run is trained per (momentum, batch size)
pair, all for elr.epochs epochs (equal sample passes), and the spread of
their test errors is reported. Batch sizes larger than the training split
are skipped.
"""

import logging
from typing import Dict

from engine.errors import ConfigError, DivergenceError
from engine.trainer import equal_elr_configs, evaluate, train

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class ElrSweepCommand(ExperimentCommand):
    description = "test-error spread across (eta, momentum, batch) at equal ELR"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)
        self.test_problem = self.problem(self.test_set)
        n = len(self.train_set)
        self.batch_sizes = [b for b in self.config["elr.batch_sizes"] if b <= n]
        skipped = [b for b in self.config["elr.batch_sizes"] if b > n]
        if skipped:
            logger.warning(f"Skipping batch sizes {skipped}: the training split has {n} samples")
        if not self.batch_sizes:
            raise ConfigError("elr.batch_sizes", f"every batch size exceeds the {n} training samples")
        self.base = self.config.optimizer_config().replace(max_epochs=self.config["elr.epochs"],
                                                           stop_tolerance=0.0)
        self.kfac_state = self.estimate_kfac(self.train_set) if self.base.preconditioner == "kfac" else None

    def run(self) -> Dict:
        rows = []
        spreads = []
        for elr in self.config["elr.values"]:
            errors = []
            for config in equal_elr_configs(self.base, elr, self.config["elr.momentum"], self.batch_sizes):
                row = {"elr": elr, "eta": config.eta, "momentum": config.momentum, "batch_size": config.batch_size}
                try:
                    trajectory = train(self.train_problem, config, kfac=self.kfac_state)
                except DivergenceError as e:
                    logger.warning(f"ELR {elr}, eta={config.eta:.4g}, m={config.momentum}, b={config.batch_size}: {e}")
                    row.update(diverged=True, final_loss=None, test_error=None)
                else:
                    row.update(diverged=False, final_loss=trajectory.final_loss,
                               test_error=evaluate(self.test_problem, trajectory.final_dw))
                    errors.append(row["test_error"])
                rows.append(row)
                self.emit("cell", **row)
            spread = max(errors) - min(errors) if errors else None
            spreads.append(spread)
            logger.info(f"ELR {elr}: {len(errors)} runs, test-error spread {spread}")
        self.table("elr_sweep.csv", rows,
                   ["elr", "eta", "momentum", "batch_size", "diverged", "final_loss", "test_error"])
        finite = [s for s in spreads if s is not None]
        return {
            "cells": len(rows),
            "diverged": sum(1 for r in rows if r["diverged"]),
            "spread_by_elr": spreads,
            "max_spread": max(finite) if finite else None,
        }
