"""
F-SI command: rank training samples by how much the network's validation
outputs would move without them.
"""

import logging
from typing import Dict

from engine import influence
from engine.quadratic import closed_form

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class FsiCommand(ExperimentCommand):
    description = "rank training samples by functional sample information"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)
        self.g_val = self.jacobians(self.val_set)

    def run(self) -> Dict:
        wstar = closed_form(self.train_problem)
        provider = influence.create_inverse_provider("exact", self.train_problem)
        report = influence.influence_report(self.train_problem, wstar, self.g_val, provider=provider)
        ranking = report.ranking()
        rows = [
            {"rank": rank, "sample_id": int(i), "label": int(self.train_set.labels[i]), "fsi": float(report.fsi[i])}
            for rank, i in enumerate(ranking)
        ]
        self.table("fsi.csv", rows, ["rank", "sample_id", "label", "fsi"])
        per_class = {
            str(c): float(report.fsi[self.train_set.labels == c].mean())
            for c in range(self.train_set.num_classes) if (self.train_set.labels == c).any()
        }
        logger.info(f"Top sample {ranking[0]} with F-SI {report.fsi[ranking[0]]:.4e}")
        return {"samples": report.num_samples, "top_sample": int(ranking[0]),
                "top_fsi": float(report.fsi[ranking[0]]), "mean_fsi_per_class": per_class}
