"""
K-shot command: with only k samples per class, compare the linearized
optimum against nonlinear fine-tuning of the same base network.

The nonlinear reference sweeps a learning-rate x weight-decay grid and keeps
the cell with the lowest validation error. Two last-layer baselines are
reported next to it: LQF-FC (only the final Dense block linearized) and
standard FC fine-tuning with the best grid cell's hyper-parameters.
"""

import logging
from pathlib import Path
from typing import Dict

import numpy as np

from engine.data import LabeledDataset, kshot_subsample
from engine.network import LINEARIZE_LAST, NetworkSpec, ParamVector, TangentModel, parameter_span
from engine.quadratic import assemble, closed_form
from engine.storage import MetricsWriter
from engine.trainer import evaluate, evaluate_nonlinear, train_nonlinear
from manager import best_cell, grid_cells, run_grid

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


def nlft_cell(cell: Dict, cell_dir: Path) -> Dict:
    """One nonlinear fine-tuning run; module level so worker processes can pickle it."""
    spec = NetworkSpec.from_document(cell["spec"])
    w0 = ParamVector(cell["w0"], spec.layout())
    model = TangentModel(spec, w0)
    train_set = LabeledDataset(*cell["train"], num_classes=spec.output_dim)
    val_set = LabeledDataset(*cell["val"], num_classes=spec.output_dim)
    test_set = LabeledDataset(*cell["test"], num_classes=spec.output_dim)
    config = cell["config"].replace(eta=cell["eta"], weight_decay=cell["weight_decay"],
                                    batch_size=min(cell["config"].batch_size or len(train_set), len(train_set)))
    with MetricsWriter(cell_dir / "metrics.jsonl", record_time=cell["record_time"]) as metrics:
        trajectory = train_nonlinear(spec, w0, train_set, config,
                                     on_step=lambda r: metrics.write("step", **r.to_dict()))
        w = w0.values + trajectory.final_dw
        result = {
            "eta": cell["eta"], "weight_decay": cell["weight_decay"],
            "val_error": evaluate_nonlinear(model, w, val_set),
            "test_error": evaluate_nonlinear(model, w, test_set),
            "final_loss": trajectory.final_loss,
        }
        metrics.write("summary", **result)
    return result


class KshotCommand(ExperimentCommand):
    description = "low-shot LQF vs nonlinear fine-tuning"

    def setup(self):
        super().setup()
        self.test_problem = self.problem(self.test_set)
        self.last_span = parameter_span(self.model.spec, LINEARIZE_LAST)
        self.test_problem_fc = self._last_layer_problem(self.test_set)

    def _last_layer_problem(self, dataset):
        return assemble(self.model, dataset, alpha=self.config["problem.alpha"],
                        lam=self.config["problem.lambda"], scope=LINEARIZE_LAST)

    def _fc(self, subset, best: Dict) -> float:
        """Standard FC fine-tuning: only the final Dense block trains."""
        config = self.config.nlft_config()
        config = config.replace(eta=best["eta"], weight_decay=best["weight_decay"],
                                batch_size=min(config.batch_size or len(subset), len(subset)))
        trajectory = train_nonlinear(self.model.spec, self.model.w0, subset, config, span=self.last_span)
        return evaluate_nonlinear(self.model, self.model.w0.values + trajectory.final_dw, self.test_set)

    def _nlft(self, subset, k: int) -> Dict:
        base = {
            "spec": self.model.spec.to_document(),
            "w0": np.array(self.model.w0.values),
            "train": (subset.inputs, subset.labels),
            "val": (self.val_set.inputs, self.val_set.labels),
            "test": (self.test_set.inputs, self.test_set.labels),
            "config": self.config.nlft_config(),
            "record_time": self.config["run.record_time"],
        }
        if self.config["kshot.use_grid"]:
            axes = grid_cells(eta=self.config["grid.eta"], weight_decay=self.config["grid.weight_decay"])
        else:
            axes = [{"eta": self.config["nlft.eta"], "weight_decay": self.config["nlft.weight_decay"]}]
        cells = [{**base, **axis} for axis in axes]
        results = run_grid(nlft_cell, cells, self.out_dir / f"k{k}", self.config["grid.workers"])
        return best_cell(results, "val_error")

    def run(self) -> Dict:
        rows = []
        for k in self.config["kshot.k"]:
            subset = kshot_subsample(self.train_set, k, self.seed)
            wstar = closed_form(self.problem(subset))
            lqf_error = evaluate(self.test_problem, wstar)
            lqf_fc_error = evaluate(self.test_problem_fc, closed_form(self._last_layer_problem(subset)))
            best = self._nlft(subset, k)
            row = {"k": k, "lqf_test_error": lqf_error, "nlft_test_error": best["test_error"],
                   "lqf_fc_test_error": lqf_fc_error, "fc_test_error": self._fc(subset, best),
                   "nlft_eta": best["eta"], "nlft_weight_decay": best["weight_decay"], "seed": self.seed}
            rows.append(row)
            self.emit("kshot", **row)
            logger.info(f"k={k}: LQF error {lqf_error:.4f}, NLFT error {best['test_error']:.4f}")
        self.table("kshot.csv", rows)
        return {"ks": [r["k"] for r in rows],
                "lqf_test_error": [r["lqf_test_error"] for r in rows],
                "nlft_test_error": [r["nlft_test_error"] for r in rows],
                "lqf_fc_test_error": [r["lqf_fc_test_error"] for r in rows],
                "fc_test_error": [r["fc_test_error"] for r in rows]}
