"""
Base class for experiment commands.

Commands implement a simple lifecycle:
1. setup() - build datasets, the tangent model and problems
2. run() - do the experiment, return a summary dictionary
3. cleanup() - release resources (always called)

The base class owns the shared plumbing: dataset generation or loading,
the pre-trained base network, problem assembly and metrics output.
"""

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from engine import data as datasets
from engine import kfac as kfac_module
from engine.errors import ContractError
from engine.network import TangentModel, batch_jacobian, build_mlp_spec, embed_delta, init_params, parameter_span
from engine.quadratic import DENSE_GUARD, LinearizedProblem, assemble
from engine.storage import MetricsWriter, load_params, load_spec, write_csv

logger = logging.getLogger(__name__)


class ExperimentCommand(ABC):
    """
    Base class for all lqf commands.

    Args:
        config: Resolved RunConfig
        out_dir: Directory receiving every output of the run
        metrics: Open MetricsWriter of the run
    """

    description = ""

    def __init__(self, config, out_dir: Path, metrics: MetricsWriter):
        self.config = config
        self.out_dir = Path(out_dir)
        self.metrics = metrics
        self.seed = config.seed
        self.train_set: Optional[datasets.LabeledDataset] = None
        self.val_set: Optional[datasets.LabeledDataset] = None
        self.test_set: Optional[datasets.LabeledDataset] = None
        self.pretrain_set: Optional[datasets.LabeledDataset] = None
        self.model: Optional[TangentModel] = None
        self.scope = config["model.linearize"]
        self.span: Optional[slice] = None

    def setup(self):
        """Build datasets and the tangent model; commands extend this."""
        self.load_datasets()
        self.build_model()

    @abstractmethod
    def run(self) -> Dict:
        """
        Execute the experiment.

        Returns:
            Summary written as the final metrics record
        """
        pass

    def cleanup(self):
        pass

    # ------------------------------------------------------------------
    # Shared plumbing
    # ------------------------------------------------------------------

    def load_datasets(self):
        """Generate the synthetic transfer task or read the CSV files."""
        cfg = self.config.section("data")
        if cfg["source"] == "blobs":
            self.pretrain_set, finetune = datasets.gen_transfer_pair(
                cfg["classes"], cfg["per_class"], cfg["dim"], cfg["separation"], cfg["shift"], self.seed,
            )
            train_val, self.test_set = datasets.train_test_split(finetune, cfg["test_fraction"], self.seed)
        elif cfg["source"] == "csv":
            if not cfg["train_csv"] or not cfg["test_csv"]:
                raise ContractError("data.source = csv needs data.train_csv and data.test_csv")
            train_val = datasets.load_csv(cfg["train_csv"])
            self.test_set = datasets.load_csv(cfg["test_csv"], num_classes=train_val.num_classes)
        else:
            raise ContractError(f"unknown data.source '{cfg['source']}', expected 'blobs' or 'csv'")
        self.train_set, self.val_set = datasets.train_test_split(train_val, cfg["val_fraction"], self.seed + 1)
        logger.info(
            f"Datasets: train={len(self.train_set)}, val={len(self.val_set)}, test={len(self.test_set)}, "
            f"C={self.train_set.num_classes}"
        )

    def build_model(self):
        """Load or pre-train the base network and freeze it as a TangentModel."""
        cfg = self.config.section("model")
        if cfg["spec"]:
            spec = load_spec(cfg["spec"])
        else:
            spec = build_mlp_spec(
                self.train_set.dim, cfg["hidden"], self.train_set.num_classes,
                slope=cfg["leaky_slope"], bias=cfg["bias"], pool=cfg["pool"],
                pool_channels=cfg["pool_channels"], pool_tangent_mode=cfg["pool_tangent_mode"],
            )
        if cfg["weights"]:
            w0 = load_params(cfg["weights"])
        elif self.pretrain_set is not None:
            w0 = datasets.gen_pretrained_base(spec, self.pretrain_set, cfg["pretrain_epochs"], self.seed,
                                              self.config.nlft_config())
        else:
            w0 = init_params(spec, self.seed)
        self.model = TangentModel(spec, w0)
        self.span = parameter_span(spec, self.scope)
        logger.info(
            f"Tangent model: D={self.model.num_params}, C={self.model.num_classes}, "
            f"linearized {self.span.stop - self.span.start} parameters ({self.scope})"
        )

    def problem(self, dataset, lam: Optional[float] = None) -> LinearizedProblem:
        lam = self.config["problem.lambda"] if lam is None else lam
        return assemble(self.model, dataset, alpha=self.config["problem.alpha"], lam=lam, scope=self.scope)

    def jacobians(self, dataset) -> np.ndarray:
        """(M, C, D) Jacobians of a dataset at w0, restricted to the linearized span."""
        return batch_jacobian(self.model, dataset.inputs)[:, :, self.span]

    def estimate_kfac(self, dataset, model: Optional[TangentModel] = None,
                      span: Optional[slice] = None) -> kfac_module.KfacState:
        """
        K-FAC state of the linearized span on `dataset`.

        `model` and `span` default to the run's tangent model and span.

        trainer.damping wins when set; otherwise the damping is problem.lambda,
        so that the damped factors approximate H = F + lambda I. A zero lambda
        falls back to the mean-eigenvalue default.
        """
        damping = self.config["trainer.damping"]
        if damping is None and self.config["problem.lambda"] > 0:
            damping = self.config["problem.lambda"]
        model = self.model if model is None else model
        span = self.span if span is None else span
        state = kfac_module.estimate(model, dataset, damping=damping,
                                     damping_style=self.config["trainer.damping_style"])
        if span.stop - span.start == model.num_params:
            return state
        return state.restricted(span)

    def full_delta(self, dw) -> np.ndarray:
        """Delta over every network parameter, zero outside the linearized span."""
        return embed_delta(dw, self.span, self.model.num_params)

    def dense_ok(self) -> bool:
        return self.span.stop - self.span.start <= DENSE_GUARD

    def emit(self, event: str, **fields):
        self.metrics.write(event, **fields)

    def step_logger(self, event: str = "step", **tags):
        """on_step callback streaming trajectory records to the metrics file."""
        def on_step(record):
            self.metrics.write(event, **tags, **record.to_dict())
        return on_step

    def table(self, name: str, rows, columns=None) -> Path:
        return write_csv(self.out_dir / name, rows, columns)
