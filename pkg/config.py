"""
Run configuration for the lqf command line.

A config document is a flat list of dotted keys:

    # comment
    trainer.eta = 0.1
    trainer.preconditioner = "kfac"
    lambda.values = [0.01, 0.001]

Values are JSON literals; anything that does not parse as JSON is kept as a
bare string. Every key must exist in DEFAULTS, and a value must match the
type of its default.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from engine.errors import ConfigError, StorageError
from engine.trainer import OptimizerConfig

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "config.snapshot"

DEFAULTS: Dict[str, Any] = {
    # run
    "run.seed": 0,
    "run.out": "runs/latest",
    "run.record_time": True,
    # data
    "data.source": "blobs",
    "data.train_csv": "",
    "data.test_csv": "",
    "data.classes": 3,
    "data.per_class": 40,
    "data.dim": 8,
    "data.separation": 3.0,
    "data.shift": 1.0,
    "data.test_fraction": 0.3,
    "data.val_fraction": 0.2,
    # model
    "model.spec": "",
    "model.weights": "",
    "model.hidden": [16],
    "model.leaky_slope": 0.01,
    "model.bias": True,
    "model.pool": None,
    "model.pool_channels": None,
    "model.pool_tangent_mode": "sylvester",
    "model.pretrain_epochs": 20,
    "model.linearize": "all",
    # problem
    "problem.alpha": 15.0,
    "problem.lambda": 1e-4,
    # linearized trainer
    "trainer.eta": 0.1,
    "trainer.momentum": 0.9,
    "trainer.batch_size": None,
    "trainer.preconditioner": "kfac",
    "trainer.damping": None,
    "trainer.damping_style": "eigen",
    "trainer.adam_beta1": 0.9,
    "trainer.adam_beta2": 0.999,
    "trainer.adam_eps": 1e-8,
    "trainer.max_epochs": 2000,
    "trainer.stop_tolerance": 1e-8,
    "trainer.schedule": "constant",
    "trainer.decay_steps": 100.0,
    "trainer.log_every": 1,
    # nonlinear reference trainer
    "nlft.eta": 0.01,
    "nlft.momentum": 0.9,
    "nlft.batch_size": 16,
    "nlft.max_epochs": 100,
    "nlft.weight_decay": 1e-4,
    "nlft.loss": "cross-entropy",
    # influence
    "influence.method": "exact",
    "influence.compare_kfac": True,
    # summarize
    "summarize.k": 10,
    "summarize.mode": "drop-top",
    # lambda path
    "lambda.values": [1e-2, 1e-3, 1e-4],
    "lambda.cold_compare": True,
    "lambda.descent_steps": 0,
    "lambda.step_size": 0.5,
    # k-shot
    "kshot.k": [1, 2, 5],
    "kshot.use_grid": True,
    # online
    "online.increments": 5,
    "online.threshold": 0.005,
    "online.patience": 5,
    "online.nlft": True,
    # ablation
    "ablation.variants": ["lqf", "lqf-ce", "lqf-no-kfac", "lqf-relu", "lqf-fc", "fc", "nlft", "nlft-mse"],
    "ablation.epochs": 50,
    "ablation.relu_slope": 1e-6,
    # equal-ELR sweep
    "elr.values": [0.001, 0.003],
    "elr.momentum": [0.0, 0.5, 0.9],
    "elr.batch_sizes": [8, 16],
    "elr.epochs": 30,
    # verify
    "verify.checks": [],
    # grid
    "grid.workers": 1,
    "grid.eta": [0.01, 0.001],
    "grid.weight_decay": [1e-4, 1e-5],
}


def parse_value(raw: str) -> Any:
    """JSON literal when possible, bare string otherwise."""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key: str, value: Any) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(key, "unknown configuration key")
    default = DEFAULTS[key]
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return value
    return value


def parse_document(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse a config document line by line.

    Args:
        text: Document contents
        source: Name used in error messages

    Returns:
        Dictionary of validated key -> value
    """
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}", "expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _coerce(key, parse_value(raw))
    return values


def parse_override(item: str) -> Dict[str, Any]:
    """Parse one --set key=value override."""
    if "=" not in item:
        raise ConfigError(item, "overrides must read key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    return {key: _coerce(key, parse_value(raw))}


class RunConfig:
    """
    Resolved configuration of one run.

    Args:
        values: Overrides applied on top of DEFAULTS
    """

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.values[key] = _coerce(key, value)

    @classmethod
    def resolve(cls, config_path=None, overrides: Iterable[str] = (), seed: Optional[int] = None,
                out: Optional[str] = None) -> "RunConfig":
        """
        Apply DEFAULTS < config file < --set overrides < --seed/--out.

        Returns:
            RunConfig
        """
        values: Dict[str, Any] = {}
        if config_path:
            path = Path(config_path)
            try:
                text = path.read_text()
            except OSError as e:
                raise StorageError(path, f"cannot read config: {e}")
            values.update(parse_document(text, str(path)))
        for item in overrides or ():
            values.update(parse_override(item))
        if seed is not None:
            values["run.seed"] = seed
        if out is not None:
            values["run.out"] = out
        return cls(values)

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(key, "unknown configuration key")
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def section(self, prefix: str) -> Dict[str, Any]:
        """All keys under `prefix.`, with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.values.items() if k.startswith(head)}

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        merged = dict(self.values)
        merged.update(overrides)
        return RunConfig(merged)

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run.out"])

    def optimizer_config(self) -> OptimizerConfig:
        """OptimizerConfig of the linearized trainer."""
        t = self.section("trainer")
        return OptimizerConfig(
            eta=t["eta"], momentum=t["momentum"], batch_size=t["batch_size"],
            preconditioner=t["preconditioner"], max_epochs=t["max_epochs"],
            stop_tolerance=t["stop_tolerance"], seed=self.seed, schedule=t["schedule"],
            decay_steps=t["decay_steps"], kfac_damping=t["damping"],
            kfac_damping_style=t["damping_style"], adam_beta1=t["adam_beta1"],
            adam_beta2=t["adam_beta2"], adam_eps=t["adam_eps"], log_every=t["log_every"],
        )

    def nlft_config(self) -> OptimizerConfig:
        """OptimizerConfig of the nonlinear reference trainer."""
        n = self.section("nlft")
        return OptimizerConfig(
            eta=n["eta"], momentum=n["momentum"], batch_size=n["batch_size"],
            max_epochs=n["max_epochs"], seed=self.seed, loss=n["loss"],
            weight_decay=n["weight_decay"], alpha=self.values["problem.alpha"],
            stop_tolerance=0.0,
        )

    def to_document(self) -> str:
        """Serialize as a config document with sorted keys."""
        lines = [f"{key} = {json.dumps(self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_snapshot(self, out_dir) -> Path:
        path = Path(out_dir) / SNAPSHOT_NAME
        try:
            path.write_text(self.to_document())
        except OSError as e:
            raise StorageError(path, f"cannot write config snapshot: {e}")
        logger.debug(f"Wrote config snapshot to {path}")
        return path
