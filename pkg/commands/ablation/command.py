"""
Ablation command: which ingredients of LQF matter.

Every variant fine-tunes the same base network on the same split:

    lqf          quadratic loss, K-FAC, Leaky-ReLU, every layer linearized
    lqf-ce       cross-entropy on the tangent model instead of the quadratic loss
    lqf-no-kfac  plain gradient descent at 1 / lambda_max(H)
    lqf-relu     the tangent model with ReLU-like activations
    lqf-fc       only the final Dense block linearized
    fc           nonlinear fine-tuning of the final Dense block
    nlft         nonlinear fine-tuning of every layer, cross-entropy
    nlft-mse     nonlinear fine-tuning of every layer, quadratic loss

Linearized variants train for ablation.epochs epochs with the trainer.*
settings; the nonlinear ones use nlft.*.
"""

import dataclasses
import logging
from typing import Dict, Optional

from engine.errors import ConfigError, GuardError
from engine.network import LINEARIZE_ALL, LINEARIZE_LAST, Activation, TangentModel, parameter_span
from engine.quadratic import assemble, exact_hessian, spectrum
from engine.trainer import evaluate, evaluate_nonlinear, train, train_linearized_ce, train_nonlinear

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)

VARIANTS = ("lqf", "lqf-ce", "lqf-no-kfac", "lqf-relu", "lqf-fc", "fc", "nlft", "nlft-mse")


class AblationCommand(ExperimentCommand):
    description = "ablate the loss, the preconditioner, the activation and the linearized span"

    def setup(self):
        unknown = [v for v in self.config["ablation.variants"] if v not in VARIANTS]
        if unknown:
            raise ConfigError("ablation.variants", f"unknown variants {unknown}, expected some of {list(VARIANTS)}")
        super().setup()
        n = len(self.train_set)
        self.optimizer = self.config.optimizer_config().replace(max_epochs=self.config["ablation.epochs"])
        if self.optimizer.batch_size is not None and self.optimizer.batch_size > n:
            self.optimizer = self.optimizer.replace(batch_size=n)
        self.nlft = self.config.nlft_config()
        self.nlft = self.nlft.replace(batch_size=min(self.nlft.batch_size or n, n))

    def _relu_model(self) -> TangentModel:
        # NetworkSpec keeps slopes in (0, 1); the smallest admissible leak stands in for ReLU
        slope = self.config["ablation.relu_slope"]
        spec = self.model.spec
        layers = tuple(Activation(slope) if isinstance(layer, Activation) else layer for layer in spec.layers)
        return TangentModel(dataclasses.replace(spec, layers=layers), self.model.w0)

    def _lqf(self, model: TangentModel, scope: str = LINEARIZE_ALL, loss: str = "mse",
             kfac: bool = True) -> Dict:
        kw = {"alpha": self.config["problem.alpha"], "lam": self.config["problem.lambda"], "scope": scope}
        train_problem = assemble(model, self.train_set, **kw)
        test_problem = assemble(model, self.test_set, **kw)
        optimizer = self.optimizer
        state = None
        if kfac:
            state = self.estimate_kfac(self.train_set, model=model, span=parameter_span(model.spec, scope))
            optimizer = optimizer.replace(preconditioner="kfac")
        else:
            optimizer = optimizer.replace(preconditioner="none")
            try:
                optimizer = optimizer.replace(eta=1.0 / spectrum(exact_hessian(train_problem)).max)
            except GuardError:
                logger.warning(f"D={train_problem.dim} exceeds the dense guard; plain SGD keeps eta={optimizer.eta}")
        fit = train_linearized_ce if loss == "cross-entropy" else train
        trajectory = fit(train_problem, optimizer, kfac=state)
        dw = trajectory.final_dw
        return {"train_error": evaluate(train_problem, dw), "test_error": evaluate(test_problem, dw),
                "steps": trajectory.steps, "final_loss": trajectory.final_loss}

    def _nonlinear(self, loss: str, span: Optional[slice] = None) -> Dict:
        trajectory = train_nonlinear(self.model.spec, self.model.w0, self.train_set,
                                     self.nlft.replace(loss=loss), span=span)
        w = self.model.w0.values + trajectory.final_dw
        return {"train_error": evaluate_nonlinear(self.model, w, self.train_set),
                "test_error": evaluate_nonlinear(self.model, w, self.test_set),
                "steps": trajectory.steps, "final_loss": trajectory.final_loss}

    def _variant(self, name: str) -> Dict:
        if name == "lqf":
            return self._lqf(self.model)
        if name == "lqf-ce":
            return self._lqf(self.model, loss="cross-entropy")
        if name == "lqf-no-kfac":
            return self._lqf(self.model, kfac=False)
        if name == "lqf-relu":
            return self._lqf(self._relu_model())
        if name == "lqf-fc":
            return self._lqf(self.model, scope=LINEARIZE_LAST)
        if name == "fc":
            return self._nonlinear("cross-entropy", span=parameter_span(self.model.spec, LINEARIZE_LAST))
        if name == "nlft":
            return self._nonlinear("cross-entropy")
        return self._nonlinear("mse")

    def run(self) -> Dict:
        rows = []
        for name in self.config["ablation.variants"]:
            row = {"variant": name, **self._variant(name)}
            rows.append(row)
            self.emit("variant", **row)
            logger.info(f"{name}: test error {row['test_error']:.4f} after {row['steps']} steps")
        self.table("ablation.csv", rows, ["variant", "train_error", "test_error", "steps", "final_loss"])
        summary = {f"{r['variant']}_test_error": r["test_error"] for r in rows}
        summary["variants"] = len(rows)
        return summary
