"""
Train command: K-FAC (or other) preconditioned SGD on the linearized problem.
"""

import logging
from typing import Dict

import numpy as np

from engine import kfac as kfac_module
from engine.errors import GuardError
from engine.network import ParamVector
from engine.quadratic import closed_form, loss
from engine.storage import save_kfac, save_params
from engine.trainer import evaluate, train

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class TrainCommand(ExperimentCommand):
    """
    Minimizes the linearized loss and compares the result with the closed form.

    Outputs: trajectory.csv, weights.lqfw (w0 + dw), delta.lqfw, kfac.lqfk
    when K-FAC is used.
    """

    description = "train the tangent model with preconditioned SGD"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)
        self.test_problem = self.problem(self.test_set)
        self.optimizer = self.config.optimizer_config()
        self.kfac_state = None

    def _estimate_kfac(self):
        self.kfac_state = self.estimate_kfac(self.train_set)
        save_kfac(self.kfac_state, self.out_dir / "kfac.lqfk")
        if self.dense_ok():
            error = kfac_module.approximation_error(self.kfac_state, self.train_problem)
            logger.info(f"K-FAC approximation error: {error:.4e}")
            self.emit("kfac", approximation_error=error, damping=self.kfac_state.damping)

    def run(self) -> Dict:
        if self.optimizer.preconditioner == "kfac":
            self._estimate_kfac()

        wstar = None
        reference_loss = None
        try:
            wstar = closed_form(self.train_problem)
            reference_loss = loss(self.train_problem, wstar)
        except GuardError:
            logger.info("Skipping the closed-form reference: D exceeds the dense guard")

        trajectory = train(
            self.train_problem, self.optimizer, kfac=self.kfac_state, wstar=wstar,
            on_step=self.step_logger(),
        )
        dw = trajectory.final_dw
        save_params(self.model.w0.shifted(self.full_delta(dw)), self.out_dir / "weights.lqfw")
        save_params(ParamVector(self.full_delta(dw), self.model.w0.layout), self.out_dir / "delta.lqfw")
        self.table("trajectory.csv", [r.to_dict() for r in trajectory.records],
                   ["step", "epoch", "loss", "grad_norm", "dist_to_opt"])

        summary = {
            "steps": trajectory.steps,
            "stop_reason": trajectory.stop_reason,
            "final_loss": trajectory.final_loss,
            "train_error": evaluate(self.train_problem, dw),
            "test_error": evaluate(self.test_problem, dw),
        }
        if reference_loss is not None:
            summary["closed_form_loss"] = reference_loss
            summary["relative_gap"] = abs(trajectory.final_loss - reference_loss) / max(abs(reference_loss), np.finfo(float).tiny)
        logger.info(f"Train finished: loss={summary['final_loss']:.6e}, test error={summary['test_error']:.4f}")
        return summary
