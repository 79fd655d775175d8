"""
Online command: data arrives in increments D_1 ... D_T. At every increment
the linearized model is trained on the running union, starting from the
previous increment's weights, and compared with the paragon solved from
scratch on the same union.

With online.nlft the nonlinear network is fine-tuned the same way: each
increment continues from the previous increment's nonlinear weights.
"""

import logging
from typing import Dict

import numpy as np

from engine.data import stream_increments
from engine.quadratic import closed_form
from engine.trainer import ConsecutiveErrorStop, evaluate, evaluate_nonlinear, train, train_nonlinear

from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


def _fit_batch(config, n: int):
    if config.batch_size is not None and config.batch_size > n:
        return config.replace(batch_size=n)
    return config


class OnlineCommand(ExperimentCommand):
    description = "incremental LQF vs retraining from scratch"

    def setup(self):
        super().setup()
        self.chunks = stream_increments(self.train_set, self.config["online.increments"], self.seed)
        self.test_problem = self.problem(self.test_set)
        self.optimizer = self.config.optimizer_config()
        self.nlft = self.config.nlft_config() if self.config["online.nlft"] else None

    def run(self) -> Dict:
        rows = []
        dw = None
        w_nlft = np.array(self.model.w0.values)
        seen = None
        for t, chunk in enumerate(self.chunks, start=1):
            seen = chunk if seen is None else seen.concat(chunk, name=f"{self.train_set.name}-upto{t}")
            problem = self.problem(seen)
            optimizer = _fit_batch(self.optimizer, len(seen))
            state = self.estimate_kfac(seen) if optimizer.preconditioner == "kfac" else None
            stop = ConsecutiveErrorStop(lambda w, p=problem: evaluate(p, w),
                                        threshold=self.config["online.threshold"],
                                        patience=self.config["online.patience"])
            trajectory = train(problem, optimizer, kfac=state, w_start=dw, stop_rule=stop,
                               on_step=self.step_logger(increment=t))
            dw = trajectory.final_dw

            paragon = closed_form(problem)
            row = {
                "increment": t,
                "samples": len(seen),
                "steps": trajectory.steps,
                "stop_reason": trajectory.stop_reason,
                "incremental_test_error": evaluate(self.test_problem, dw),
                "paragon_test_error": evaluate(self.test_problem, paragon),
            }
            row["gap"] = row["incremental_test_error"] - row["paragon_test_error"]
            if self.nlft is not None:
                nonlinear = train_nonlinear(self.model.spec, w_nlft, seen, _fit_batch(self.nlft, len(seen)),
                                            on_step=self.step_logger("nlft_step", increment=t))
                w_nlft = w_nlft + nonlinear.final_dw
                row["nlft_test_error"] = evaluate_nonlinear(self.model, w_nlft, self.test_set)
            rows.append(row)
            self.emit("increment", **row)
            logger.info(
                f"Increment {t}/{len(self.chunks)}: N={len(seen)}, incremental error "
                f"{row['incremental_test_error']:.4f}, paragon {row['paragon_test_error']:.4f}"
                + (f", NLFT {row['nlft_test_error']:.4f}" if self.nlft is not None else "")
            )
        self.table("online.csv", rows)
        summary = {
            "increments": len(rows),
            "max_gap": max(r["gap"] for r in rows),
            "final_incremental_test_error": rows[-1]["incremental_test_error"],
            "final_paragon_test_error": rows[-1]["paragon_test_error"],
        }
        if self.nlft is not None:
            summary["final_nlft_test_error"] = rows[-1]["nlft_test_error"]
        return summary
