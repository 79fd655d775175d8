"""
Solve command: the unique global optimum dw* = (F + lambda I)^-1 (1/N) J^T r.
"""

import logging
from typing import Dict

import numpy as np

from engine.network import ParamVector
from engine.quadratic import closed_form, gradient, loss
from engine.storage import save_params, save_problem
from engine.trainer import evaluate

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class SolveCommand(ExperimentCommand):
    """Writes dw*, the weights w0 + dw* and the assembled problem (LQFP)."""

    description = "solve the linearized problem in closed form"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)
        self.test_problem = self.problem(self.test_set)

    def run(self) -> Dict:
        wstar = closed_form(self.train_problem)
        save_problem(self.train_problem, self.out_dir / "problem.lqfp")
        save_params(ParamVector(self.full_delta(wstar), self.model.w0.layout), self.out_dir / "delta.lqfw")
        save_params(self.model.w0.shifted(self.full_delta(wstar)), self.out_dir / "weights.lqfw")
        summary = {
            "loss": loss(self.train_problem, wstar),
            "grad_norm": float(np.linalg.norm(gradient(self.train_problem, wstar))),
            "dw_norm": float(np.linalg.norm(wstar)),
            "train_error": evaluate(self.train_problem, wstar),
            "test_error": evaluate(self.test_problem, wstar),
        }
        logger.info(f"Closed form: loss={summary['loss']:.6e}, test error={summary['test_error']:.4f}")
        return summary
