"""
Summarize command: drop the k most (or least) informative samples, re-solve
and measure the test error.
"""

import logging
from typing import Dict

from engine import influence
from engine.quadratic import closed_form

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class SummarizeCommand(ExperimentCommand):
    description = "drop top or bottom F-SI samples and re-solve"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)
        self.test_problem = self.problem(self.test_set)
        self.g_val = self.jacobians(self.val_set)

    def run(self) -> Dict:
        k = self.config["summarize.k"]
        configured = self.config["summarize.mode"]
        modes = [configured] + [m for m in (influence.DROP_TOP, influence.DROP_BOTTOM) if m != configured]

        wstar = closed_form(self.train_problem)
        provider = influence.create_inverse_provider("exact", self.train_problem)
        report = influence.influence_report(self.train_problem, wstar, self.g_val, provider=provider)

        rows = []
        baseline = influence.summarize(self.train_problem, report, 0, configured, self.test_problem)
        for mode in modes:
            for result in (baseline, influence.summarize(self.train_problem, report, k, mode, self.test_problem)):
                row = {"k": result.k, "mode": mode, "test_error": result.test_error, "seed": self.seed}
                rows.append(row)
                self.emit("summarize", **row)
        self.table("summarize.csv", rows, ["k", "mode", "test_error", "seed"])

        errors = {row["mode"]: row["test_error"] for row in rows if row["k"] == k}
        return {"k": k, "baseline_error": baseline.test_error, **{f"{m}_error": e for m, e in errors.items()}}
