"""
Influence command: exact leave-one-out weight and activation changes.

Optionally repeats the computation with the K-FAC inverse and reports the
Spearman correlation between the two sample rankings.
"""

import logging
from typing import Dict

import numpy as np

from engine import influence
from engine.quadratic import closed_form

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class InfluenceCommand(ExperimentCommand):
    description = "leave-one-out influence of every training sample"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)
        self.g_val = self.jacobians(self.val_set)
        self.g_test = self.jacobians(self.test_set)

    def _provider(self, method: str):
        if method == "brute-force":
            return None
        if method == "kfac":
            state = self.estimate_kfac(self.train_set)
            return influence.create_inverse_provider("kfac", self.train_problem, state)
        return influence.create_inverse_provider(method, self.train_problem)

    def run(self) -> Dict:
        method = self.config["influence.method"]
        wstar = closed_form(self.train_problem)
        report = influence.influence_report(
            self.train_problem, wstar, self.g_val, self.g_test, self._provider(method),
        )
        self.table("influence.csv", report.rows(), ["sample_id", "fsi", "weight_delta_norm", "method"])
        mean_abs = np.abs(report.activation_deltas).mean(axis=(1, 2)) if report.activation_deltas.size else np.zeros(report.num_samples)
        for i in range(report.num_samples):
            self.emit("sample", sample_id=i, fsi=report.fsi[i], weight_delta_norm=report.weight_delta_norm[i],
                      mean_abs_test_delta=mean_abs[i], method=report.method)

        summary = {
            "method": report.method,
            "samples": report.num_samples,
            "max_fsi": float(report.fsi.max()),
            "mean_fsi": float(report.fsi.mean()),
            "most_influential": int(report.ranking()[0]),
        }
        if self.config["influence.compare_kfac"] and method != "kfac":
            approx = influence.influence_report(
                self.train_problem, wstar, self.g_val, None, self._provider("kfac"),
            )
            summary["kfac_spearman"] = influence.rank_correlation(report, approx)
            logger.info(f"Spearman correlation of {report.method} vs kfac F-SI: {summary['kfac_spearman']:.4f}")
        return summary
