"""
Lambda-path command: fine-tune along a sequence of weight decays, each run
warm-started from the previous optimum, and check every endpoint against
the closed form.
"""

import logging
from typing import Dict

from engine import lambda_tune
from engine.quadratic import closed_form, loss

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class LambdaPathCommand(ExperimentCommand):
    description = "warm-start fine-tuning along a weight-decay path"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)
        self.val_problem = self.problem(self.val_set)
        self.optimizer = self.config.optimizer_config()

    def run(self) -> Dict:
        lambdas = self.config["lambda.values"]
        state = None
        if self.optimizer.preconditioner == "kfac":
            state = self.estimate_kfac(self.train_set)

        warm = lambda_tune.warm_start_path(self.train_problem, lambdas, self.optimizer, state, self.val_problem)
        rows = []
        worst_gap = 0.0
        for point in warm.points:
            at_lambda = self.train_problem.with_lambda(point.lam)
            exact = loss(at_lambda, closed_form(at_lambda))
            gap = abs(point.train_loss - exact) / max(abs(exact), 1e-300)
            worst_gap = max(worst_gap, gap)
            grad = lambda_tune.lambda_gradient(at_lambda, self.val_problem)
            row = {**point.to_dict(), "closed_form_loss": exact, "relative_gap": gap, "lambda_gradient": grad}
            rows.append(row)
            self.emit("lambda", **row)
        self.table("lambda_path.csv", rows, ["lambda", "train_loss", "val_loss", "val_error", "method",
                                             "iterations", "closed_form_loss", "relative_gap", "lambda_gradient"])

        summary = {"points": len(rows), "worst_relative_gap": worst_gap,
                   "warm_iterations": warm.total_iterations}
        if self.config["lambda.cold_compare"]:
            cold = lambda_tune.cold_start_path(self.train_problem, lambdas, self.optimizer, state, self.val_problem)
            summary["cold_iterations"] = cold.total_iterations
            logger.info(f"Iterations: warm-start {warm.total_iterations}, from scratch {cold.total_iterations}")

        steps = self.config["lambda.descent_steps"]
        if steps > 0:
            history = lambda_tune.descend_lambda(self.train_problem, self.val_problem, lambdas[0], steps,
                                                 self.config["lambda.step_size"])
            for entry in history:
                self.emit("lambda_descent", step=entry.step, lam=entry.lam, val_loss=entry.val_loss,
                          gradient=entry.gradient)
            summary["descended_lambda"] = history[-1].lam
        return summary
