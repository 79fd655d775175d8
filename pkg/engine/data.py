"""
Desk-scale datasets: synthetic generators, CSV ingestion and subsampling.

All generators are deterministic per seed. The pre-trained base generator
trains the nonlinear network on a related synthetic task and returns the
resulting weights as the linearization point w0.
"""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, NumericError, StorageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledDataset:
    """
    Inputs with integer class labels.

    Args:
        inputs: (N, input_dim) float matrix
        labels: (N,) integers in [0, num_classes)
        name: Human-readable name used in manifests and logs
        seed: Seed the dataset was generated with (None for loaded data)
        num_classes: Class count C; inferred from the labels when omitted
    """

    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    seed: Optional[int] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels).astype(np.int64).ravel()
        if inputs.ndim != 2:
            raise ContractError(f"{self.name}: inputs must be 2-D, got shape {inputs.shape}")
        if inputs.shape[0] < 1:
            raise ContractError(f"{self.name}: dataset is empty")
        if labels.size != inputs.shape[0]:
            raise ContractError(f"{self.name}: {labels.size} labels for {inputs.shape[0]} inputs")
        if not np.all(np.isfinite(inputs)):
            raise NumericError(f"{self.name}: inputs contain non-finite values")
        num_classes = self.num_classes if self.num_classes is not None else int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ContractError(f"{self.name}: labels must lie in [0, {num_classes})")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(num_classes))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "LabeledDataset":
        """Rows `indices`, in the given order."""
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.inputs[indices], self.labels[indices],
            name=name or self.name, seed=self.seed, num_classes=self.num_classes,
        )

    def concat(self, other: "LabeledDataset", name: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(
            np.vstack([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            name=name or self.name, seed=self.seed,
            num_classes=max(self.num_classes, other.num_classes),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def manifest(self) -> dict:
        """Small description written next to exported CSV files."""
        return {
            "name": self.name,
            "N": len(self),
            "dim": self.dim,
            "C": self.num_classes,
            "seed": self.seed,
        }


def _class_means(classes: int, dim: int, separation: float) -> np.ndarray:
    means = np.zeros((classes, dim))
    if dim >= classes:
        # Scaled simplex corners: every pair sits `separation` apart
        means[:, :classes] = np.eye(classes) * (separation / np.sqrt(2.0))
    else:
        # Not enough room for a simplex; neighbours sit `separation` apart on a line
        means[:, 0] = np.arange(classes) * separation
    return means - means.mean(axis=0)


def gen_blobs(classes: int, per_class: int, dim: int, separation: float, seed: int,
              shift: Optional[np.ndarray] = None, name: str = "blobs") -> LabeledDataset:
    """
    Gaussian clusters with unit within-class variance.

    Args:
        classes: Number of classes C
        per_class: Samples per class
        dim: Input dimension
        separation: Distance between every pair of class means (>= 0); when
                    dim < classes the means lie on a line and only
                    neighbouring means are this far apart
        seed: RNG seed
        shift: Optional vector added to every class mean
        name: Dataset name

    Returns:
        Shuffled LabeledDataset with classes * per_class rows
    """
    if classes <= 0 or per_class <= 0 or dim <= 0:
        raise ContractError("classes, per_class and dim must be positive")
    if separation < 0:
        raise ContractError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    means = _class_means(classes, dim, separation)
    if shift is not None:
        means = means + np.asarray(shift, dtype=np.float64)
    labels = np.repeat(np.arange(classes), per_class)
    inputs = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(inputs[order], labels[order], name=name, seed=seed, num_classes=classes)


def gen_transfer_pair(classes: int, per_class: int, dim: int, separation: float,
                      shift: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    A pre-training task and a related, shifted fine-tuning task.

    Both share the class layout; the fine-tuning task moves every class mean
    by `shift` along a seeded random direction.

    Returns:
        (pretrain_task, finetune_task)
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    source = gen_blobs(classes, per_class, dim, separation, seed + 1, name="pretrain")
    target = gen_blobs(classes, per_class, dim, separation, seed + 2,
                       shift=shift * direction, name="finetune")
    return source, target


def train_test_split(dataset: LabeledDataset, test_fraction: float, seed: int
                     ) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded split; both parts keep the original row order."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise ContractError("split leaves no training samples")
    test_idx = np.sort(rng.choice(n, size=n_test, replace=False))
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return (dataset.subset(train_idx, f"{dataset.name}-train"),
            dataset.subset(test_idx, f"{dataset.name}-test"))


def kshot_subsample(dataset: LabeledDataset, k: int, seed: int) -> LabeledDataset:
    """
    Draw exactly k samples per class, without replacement.

    Selected rows keep their original relative order.

    Args:
        dataset: Source dataset
        k: Samples per class
        seed: RNG seed

    Returns:
        LabeledDataset with k * C rows
    """
    if k <= 0:
        raise ContractError("k must be positive")
    rng = np.random.default_rng(seed)
    chosen: List[np.ndarray] = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < k:
            raise ContractError(f"class {c} has {members.size} samples, fewer than k={k}")
        chosen.append(rng.choice(members, size=k, replace=False))
    indices = np.sort(np.concatenate(chosen))
    return dataset.subset(indices, f"{dataset.name}-{k}shot")


def stream_increments(dataset: LabeledDataset, increments: int, seed: int) -> List[LabeledDataset]:
    """
    Split a dataset into `increments` disjoint, class-interleaved chunks.

    Returns:
        Chunks D_1 ... D_T; the online learner sees their running union
    """
    if increments <= 0 or increments > len(dataset):
        raise ContractError("increments must lie in [1, N]")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [dataset.subset(np.sort(chunk), f"{dataset.name}-part{t}")
            for t, chunk in enumerate(np.array_split(order, increments))]


def save_csv(dataset: LabeledDataset, path) -> Path:
    """
    Write a dataset as CSV plus a JSON manifest next to it.

    Floats use the shortest round-trip representation, so save -> load ->
    save reproduces the file byte for byte.

    Args:
        dataset: Dataset to write
        path: Target .csv path; the manifest goes to <path>.json

    Returns:
        Path of the CSV file
    """
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
            for row, label in zip(dataset.inputs, dataset.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])
        with open(path.with_suffix(path.suffix + ".json"), "w") as f:
            json.dump(dataset.manifest(), f, indent=2)
    except OSError as e:
        raise StorageError(path, f"cannot write dataset: {e}")
    logger.debug(f"Saved {len(dataset)} rows to {path}")
    return path


def load_csv(path, num_classes: Optional[int] = None) -> LabeledDataset:
    """
    Read a dataset written in the f0..f{d-1},label CSV format.

    Args:
        path: CSV file
        num_classes: Class count; read from the manifest or inferred when omitted

    Returns:
        LabeledDataset named after the file
    """
    path = Path(path)
    if not path.exists():
        raise StorageError(path, "dataset file not found")
    manifest_path = path.with_suffix(path.suffix + ".json")
    seed = None
    if manifest_path.exists():
        try:
            with open(manifest_path, "r") as f:
                manifest = json.load(f)
            seed = manifest.get("seed")
            if num_classes is None:
                num_classes = manifest.get("C")
        except json.JSONDecodeError as e:
            raise StorageError(manifest_path, f"malformed manifest: {e}")

    inputs, labels = [], []
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(len(header) - 1)]:
            raise StorageError(path, "header must read f0,...,f{d-1},label", line=1)
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise StorageError(path, f"expected {width} fields, found {len(row)}", line=line_no)
            try:
                inputs.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as e:
                raise StorageError(path, f"malformed value: {e}", line=line_no)
    if not inputs:
        raise StorageError(path, "dataset has no rows")
    return LabeledDataset(np.array(inputs), np.array(labels), name=path.stem,
                          seed=seed, num_classes=num_classes)


def gen_pretrained_base(spec, pretrain_task: LabeledDataset, epochs: int, seed: int,
                        config=None):
    """
    Produce a pre-trained linearization point w0.

    Runs the reference nonlinear trainer on `pretrain_task` starting from the
    seeded random initialization.

    Args:
        spec: NetworkSpec of the base network
        pretrain_task: Related task sharing input_dim with the spec
        epochs: Pre-training epochs (0 returns the initialization)
        seed: Seed for initialization and batch shuffling
        config: Optional OptimizerConfig; SGD with momentum 0.9 by default

    Returns:
        ParamVector w0
    """
    from .network import init_params
    from .trainer import OptimizerConfig, train_nonlinear

    if pretrain_task.dim != spec.input_dim:
        raise ContractError(
            f"pre-training task has input_dim {pretrain_task.dim}, network expects {spec.input_dim}"
        )
    if pretrain_task.num_classes > spec.output_dim:
        raise ContractError("pre-training task has more classes than the network has outputs")
    w_init = init_params(spec, seed)
    if epochs <= 0:
        return w_init
    if config is None:
        config = OptimizerConfig(eta=0.05, momentum=0.9, batch_size=min(32, len(pretrain_task)),
                                 max_epochs=epochs, seed=seed)
    else:
        config = config.replace(max_epochs=epochs, seed=seed)
    logger.info(f"Pre-training base network on '{pretrain_task.name}' for {epochs} epochs")
    trajectory = train_nonlinear(spec, w_init, pretrain_task, config)
    return w_init.shifted(trajectory.final_dw)
