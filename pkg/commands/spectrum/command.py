"""
Spectrum command: eigenvalues of H and of the K-FAC preconditioned A H.

Plain gradient descent is limited by the condition number of H; the
preconditioned spectrum shows how much of it K-FAC removes.
"""

import logging
from typing import Dict

import numpy as np
import scipy.linalg

from engine import kfac as kfac_module
from engine.quadratic import exact_hessian, spectrum
from engine.trainer import max_stable_lr

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class SpectrumCommand(ExperimentCommand):
    description = "eigenvalues of H and of the K-FAC preconditioned Hessian"

    def setup(self):
        super().setup()
        self.train_problem = self.problem(self.train_set)

    def run(self) -> Dict:
        h = exact_hessian(self.train_problem)
        plain = spectrum(h)

        state = self.estimate_kfac(self.train_set)
        damped = state.damped_dense_matrix()
        # M^-1/2 H M^-1/2 is similar to the preconditioned M^-1 H
        evals, evecs = scipy.linalg.eigh(damped)
        inv_root = (evecs / np.sqrt(evals)) @ evecs.T
        preconditioned = spectrum(0.5 * (inv_root @ h @ inv_root + (inv_root @ h @ inv_root).T))
        kfac_inverse = (evecs / evals) @ evecs.T

        rows = [
            {"index": i, "hessian": float(plain.eigenvalues[i]), "preconditioned": float(preconditioned.eigenvalues[i])}
            for i in range(plain.eigenvalues.size)
        ]
        self.table("spectrum.csv", rows, ["index", "hessian", "preconditioned"])

        summary = {
            "condition_number": plain.condition_number,
            "preconditioned_condition_number": preconditioned.condition_number,
            "max_eigenvalue": plain.max,
            "min_eigenvalue": plain.min,
            "max_stable_lr_sgd": max_stable_lr(h, np.eye(h.shape[0])),
            "max_stable_lr_kfac": max_stable_lr(h, 0.5 * (kfac_inverse + kfac_inverse.T)),
            "kfac_approximation_error": kfac_module.approximation_error(state, self.train_problem),
        }
        logger.info(
            f"Condition number {summary['condition_number']:.3e} -> "
            f"{summary['preconditioned_condition_number']:.3e} with K-FAC"
        )
        return summary
