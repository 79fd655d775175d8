"""
Preconditioned SGD with momentum on the linearized problem.

The update is heavy-ball with a constant (or Adam) preconditioner A:

    w_{t+1} = w_t - eta_t A g_t + m (w_t - w_{t-1})

On the quadratic objective a momentum-free full-batch run follows
w_t - w* = (I - eta A H)^t (w_0 - w*) exactly, which predicted_distance
reproduces. A small reference trainer for the nonlinear network is kept
alongside for comparison experiments.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.special

from .errors import ContractError, DivergenceError
from .kfac import KfacState
from .network import TangentModel, as_delta, forward, linear_forward, vjp
from .preconditioners import ADAM, NONE, PRECONDITIONERS, create_preconditioner
from .quadratic import LinearizedProblem, check_guard, gradient, loss, one_hot

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6
SCHEDULES = ("constant", "decay")
NONLINEAR_LOSSES = ("cross-entropy", "mse")


@dataclass(frozen=True)
class OptimizerConfig:
    """
    Hyper-parameters of one training run.

    Args:
        eta: Learning rate (0 leaves the weights untouched)
        momentum: Heavy-ball momentum in [0, 1)
        batch_size: Samples per step; None means full batch
        preconditioner: "none", "kfac", "exact-inverse" or "adam"
        max_epochs: Passes over the training set
        stop_tolerance: Stop once ||g|| < stop_tolerance * ||g_0||
        seed: Seed of the batch shuffle
        schedule: "constant" or "decay" (eta / (1 + t / decay_steps))
        decay_steps: T of the decaying schedule
        kfac_damping: K-FAC damping; None picks the mean-eigenvalue default
        kfac_damping_style: "factored" or "eigen"
        adam_beta1, adam_beta2, adam_eps: Adam hyper-parameters
        loss: Nonlinear trainer loss, "cross-entropy" or "mse"
        weight_decay: Nonlinear trainer weight decay, added to the loss
        alpha: Target scaling for the nonlinear "mse" loss
        log_every: Keep one trajectory record every this many steps
    """

    eta: float = 0.1
    momentum: float = 0.0
    batch_size: Optional[int] = None
    preconditioner: str = NONE
    max_epochs: int = 100
    stop_tolerance: float = 1e-8
    seed: int = 0
    schedule: str = "constant"
    decay_steps: float = 100.0
    kfac_damping: Optional[float] = None
    kfac_damping_style: str = "factored"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "cross-entropy"
    weight_decay: float = 0.0
    alpha: float = 15.0
    log_every: int = 1

    def __post_init__(self):
        if self.eta < 0:
            raise ContractError(f"eta must be >= 0, got {self.eta}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {self.batch_size}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ContractError(f"unknown preconditioner '{self.preconditioner}'")
        if self.max_epochs < 0:
            raise ContractError("max_epochs must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown schedule '{self.schedule}', expected one of {SCHEDULES}")
        if self.decay_steps <= 0:
            raise ContractError("decay_steps must be > 0")
        if self.loss not in NONLINEAR_LOSSES:
            raise ContractError(f"unknown loss '{self.loss}', expected one of {NONLINEAR_LOSSES}")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if self.log_every < 1:
            raise ContractError("log_every must be >= 1")

    def replace(self, **changes) -> "OptimizerConfig":
        return dataclasses.replace(self, **changes)

    def learning_rate(self, step: int) -> float:
        if self.schedule == "decay":
            return self.eta / (1.0 + step / self.decay_steps)
        return self.eta

    def resolved_batch(self, n: int) -> int:
        b = n if self.batch_size is None else self.batch_size
        if b > n:
            raise ContractError(f"batch_size {b} exceeds the {n} training samples")
        return b


@dataclass(frozen=True)
class StepRecord:
    """One logged point of a trajectory."""

    step: int
    epoch: int
    loss: float
    grad_norm: float
    dist_to_opt: Optional[float] = None
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        record = {"step": self.step, "epoch": self.epoch, "loss": self.loss, "grad_norm": self.grad_norm}
        if self.dist_to_opt is not None:
            record["dist_to_opt"] = self.dist_to_opt
        record["wall_ms"] = self.wall_ms
        return record


@dataclass(frozen=True)
class Trajectory:
    """
    Records of a finished run.

    Args:
        records: Logged steps, strictly increasing
        final_dw: Weights (delta from w0) at the end of the run
        steps: Optimizer steps taken
        stop_reason: "tolerance", "max_epochs" or "stop_rule"
    """

    records: Tuple[StepRecord, ...]
    final_dw: np.ndarray
    steps: int
    stop_reason: str

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


StepCallback = Callable[[StepRecord], None]
StopRule = Callable[[int, np.ndarray], bool]


class ConsecutiveErrorStop:
    """
    Epoch-end stopping rule: error below `threshold` for `patience` epochs in a row.

    Args:
        error_fn: Maps the current dw to a training error rate
        threshold: Error rate that counts as solved
        patience: Consecutive epochs required
    """

    def __init__(self, error_fn: Callable[[np.ndarray], float], threshold: float = 0.005,
                 patience: int = 5):
        if patience < 1:
            raise ContractError("patience must be >= 1")
        self.error_fn = error_fn
        self.threshold = threshold
        self.patience = patience
        self.streak = 0

    def __call__(self, epoch: int, dw: np.ndarray) -> bool:
        error = self.error_fn(dw)
        self.streak = self.streak + 1 if error < self.threshold else 0
        logger.debug(f"Epoch {epoch}: train error {error:.4f}, streak {self.streak}/{self.patience}")
        return self.streak >= self.patience


def _batches(n: int, b: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, b):
        yield np.sort(order[start:start + b])


def _check_divergence(step: int, value: float, initial: float):
    if not np.isfinite(value) or value > DIVERGENCE_FACTOR * max(initial, np.finfo(float).tiny):
        raise DivergenceError(step, value)


def train(problem: LinearizedProblem, config: OptimizerConfig, kfac: Optional[KfacState] = None,
          w_start=None, wstar=None, on_step: Optional[StepCallback] = None,
          stop_rule: Optional[StopRule] = None) -> Trajectory:
    """
    Minimize the linearized loss with preconditioned SGD and momentum.

    Args:
        problem: LinearizedProblem
        config: OptimizerConfig
        kfac: Estimated KfacState, required iff config.preconditioner == "kfac"
        w_start: Starting delta (zeros by default)
        wstar: Optional optimum, recorded as ||w_t - w*|| on every record
        on_step: Called with every logged StepRecord
        stop_rule: Called at every epoch end with (epoch, dw); True stops the run

    Returns:
        Trajectory
    """
    n, d = problem.num_samples, problem.dim
    b = config.resolved_batch(n)
    preconditioner = create_preconditioner(
        config.preconditioner, problem=problem, kfac=kfac,
        **({"beta1": config.adam_beta1, "beta2": config.adam_beta2, "eps": config.adam_eps}
           if config.preconditioner == ADAM else {}),
    )
    w = np.zeros(d) if w_start is None else as_delta(w_start, d).copy()
    w_prev = w.copy()
    wstar = None if wstar is None else as_delta(wstar, d)
    rng = np.random.default_rng(config.seed)
    c = problem.num_classes
    start = time.perf_counter()
    records: List[StepRecord] = []

    def record(step: int, epoch: int, current_loss: float, grad_norm: float):
        entry = StepRecord(
            step=step, epoch=epoch, loss=current_loss, grad_norm=grad_norm,
            dist_to_opt=None if wstar is None else float(np.linalg.norm(w - wstar)),
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )
        records.append(entry)
        if on_step is not None:
            on_step(entry)

    initial_loss = loss(problem, w)
    initial_grad = float(np.linalg.norm(gradient(problem, w)))
    record(0, 0, initial_loss, initial_grad)
    logger.info(
        f"Training: N={n}, D={d}, batch={b}, eta={config.eta}, momentum={config.momentum}, "
        f"preconditioner={preconditioner.name}"
    )

    step = 0
    stop_reason = "max_epochs"
    threshold = config.stop_tolerance * initial_grad
    if initial_grad == 0.0:
        stop_reason = "tolerance"
    else:
        for epoch in range(1, config.max_epochs + 1):
            for idx in _batches(n, b, rng):
                rows = (idx[:, None] * c + np.arange(c)[None, :]).ravel()
                jb = problem.J[rows]
                grad = jb.T @ (jb @ w - problem.r[rows]) / idx.size + problem.lam * w
                direction = preconditioner.apply(grad)
                w_next = w - config.learning_rate(step) * direction + config.momentum * (w - w_prev)
                w_prev, w = w, w_next
                step += 1

                current_loss = loss(problem, w)
                _check_divergence(step, current_loss, initial_loss)
                grad_norm = float(np.linalg.norm(gradient(problem, w)))
                if step % config.log_every == 0:
                    record(step, epoch, current_loss, grad_norm)
                if grad_norm < threshold:
                    stop_reason = "tolerance"
                    break
            if stop_reason == "tolerance":
                break
            if stop_rule is not None and stop_rule(epoch, w.copy()):
                stop_reason = "stop_rule"
                break

    if records[-1].step != step:
        record(step, records[-1].epoch if step == 0 else epoch, loss(problem, w),
               float(np.linalg.norm(gradient(problem, w))))
    logger.info(f"Training stopped after {step} steps ({stop_reason}), loss={records[-1].loss:.6e}")
    w.setflags(write=False)
    return Trajectory(records=tuple(records), final_dw=w, steps=step, stop_reason=stop_reason)


def train_linearized_ce(problem: LinearizedProblem, config: OptimizerConfig,
                        kfac: Optional[KfacState] = None,
                        on_step: Optional[StepCallback] = None) -> Trajectory:
    """
    Fit the tangent model with cross-entropy instead of the quadratic loss.

    The objective mean_i CE(softmax(f0_i + g_i dw), y_i) + (lambda / 2) ||dw||^2
    has no closed form. The preconditioners are the ones of the quadratic
    problem. One record is kept per epoch.

    Args:
        problem: LinearizedProblem assembled with f0 and labels
        config: OptimizerConfig
        kfac: Estimated KfacState, required iff config.preconditioner == "kfac"
        on_step: Called with every epoch record

    Returns:
        Trajectory
    """
    if problem.f0 is None or problem.labels is None:
        raise ContractError("cross-entropy fitting needs a problem assembled with f0 and labels")
    n, d, c = problem.num_samples, problem.dim, problem.num_classes
    b = config.resolved_batch(n)
    preconditioner = create_preconditioner(
        config.preconditioner, problem=problem, kfac=kfac,
        **({"beta1": config.adam_beta1, "beta2": config.adam_beta2, "eps": config.adam_eps}
           if config.preconditioner == ADAM else {}),
    )
    jac = problem.J.reshape(n, c, d)
    targets = one_hot(problem.labels, c)

    def objective(weights, idx):
        log_probs = scipy.special.log_softmax(problem.f0[idx] + jac[idx] @ weights, axis=1)
        value = float(-np.sum(targets[idx] * log_probs) / idx.size) + 0.5 * problem.lam * float(weights @ weights)
        cot = (np.exp(log_probs) - targets[idx]) / idx.size
        return value, np.einsum("bc,bcd->d", cot, jac[idx]) + problem.lam * weights

    everyone = np.arange(n)
    w = np.zeros(d)
    w_prev = w.copy()
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    records: List[StepRecord] = []

    def record(step: int, epoch: int) -> StepRecord:
        value, grad = objective(w, everyone)
        entry = StepRecord(step=step, epoch=epoch, loss=value, grad_norm=float(np.linalg.norm(grad)),
                           wall_ms=(time.perf_counter() - start) * 1000.0)
        records.append(entry)
        if on_step is not None:
            on_step(entry)
        return entry

    initial = record(0, 0)
    step = 0
    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        for idx in _batches(n, b, rng):
            _, grad = objective(w, idx)
            w_next = w - config.learning_rate(step) * preconditioner.apply(grad) + config.momentum * (w - w_prev)
            w_prev, w = w, w_next
            step += 1
        entry = record(step, epoch)
        _check_divergence(step, entry.loss, initial.loss)
        if entry.grad_norm < config.stop_tolerance * initial.grad_norm:
            stop_reason = "tolerance"
            break

    logger.info(f"Cross-entropy fit stopped after {step} steps ({stop_reason}), loss={records[-1].loss:.6e}")
    w.setflags(write=False)
    return Trajectory(records=tuple(records), final_dw=w, steps=step, stop_reason=stop_reason)


def predicted_distance(H, A, eta: float, t: int, w0_minus_wstar) -> np.ndarray:
    """
    Closed-form distance (I - eta A H)^t (w_0 - w*) of a full-batch run.

    Args:
        H: D x D Hessian
        A: D x D constant preconditioner
        eta: Learning rate
        t: Number of steps (>= 0)
        w0_minus_wstar: Starting offset from the optimum

    Returns:
        (D,) vector, computed by t repeated multiplications
    """
    H = np.asarray(H, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    check_guard(H.shape[0], "the convergence prediction")
    if t < 0:
        raise ContractError("t must be >= 0")
    dist = np.asarray(w0_minus_wstar, dtype=np.float64).ravel().copy()
    if H.shape != A.shape or H.shape != (dist.size, dist.size):
        raise ContractError("H, A and the offset must agree on D")
    for _ in range(t):
        dist = dist - eta * (A @ (H @ dist))
    return dist


def max_stable_lr(H, A) -> float:
    """
    Largest stable constant learning rate, 2 / lambda_max(A H).

    The eigenvalues of A H are read from the symmetric similar matrix
    A^1/2 H A^1/2.
    """
    H = np.asarray(H, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    check_guard(H.shape[0], "the stability bound")
    evals, evecs = scipy.linalg.eigh(0.5 * (A + A.T))
    if evals[0] < 0:
        raise ContractError("the preconditioner must be positive semi-definite")
    root = (evecs * np.sqrt(evals)) @ evecs.T
    similar = root @ H @ root
    top = float(np.max(np.abs(scipy.linalg.eigh(0.5 * (similar + similar.T), eigvals_only=True))))
    if top == 0.0:
        return float("inf")
    return 2.0 / top


def effective_learning_rate(eta: float, momentum: float, batch_size: int) -> float:
    """ELR = eta / ((1 - m) b)."""
    if momentum >= 1.0:
        raise ContractError("momentum must be < 1")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    return eta / ((1.0 - momentum) * batch_size)


def equal_elr_configs(base: OptimizerConfig, elr: float, momenta: Sequence[float],
                      batch_sizes: Sequence[int]) -> List[OptimizerConfig]:
    """
    One configuration per (momentum, batch size) pair, all at the same ELR.

    eta is solved from ELR = eta / ((1 - m) b); every other field comes
    from `base`.

    Args:
        base: Template configuration
        elr: Shared effective learning rate (> 0)
        momenta: Momentum values in [0, 1)
        batch_sizes: Batch sizes >= 1

    Returns:
        List ordered by momentum, then batch size
    """
    if elr <= 0:
        raise ContractError(f"ELR must be > 0, got {elr}")
    configs = []
    for m in momenta:
        for b in batch_sizes:
            eta = elr * (1.0 - m) * b
            configs.append(base.replace(eta=eta, momentum=float(m), batch_size=int(b)))
    return configs


def _error_rate(outputs: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax keeps the lowest index on ties
    return float(np.mean(np.argmax(outputs, axis=1) != labels))


def evaluate(model_or_problem, dw, dataset=None) -> float:
    """
    Classification error of the tangent model f_w0 + J dw.

    Args:
        model_or_problem: TangentModel (with `dataset`) or a LinearizedProblem
                          assembled with f0 and labels (scored on its own samples)
        dw: Parameter delta
        dataset: LabeledDataset to score

    Returns:
        Error rate in [0, 1]
    """
    if isinstance(model_or_problem, LinearizedProblem):
        problem = model_or_problem
        if problem.labels is None:
            raise ContractError("problem was assembled without labels")
        return _error_rate(problem.outputs(dw), problem.labels)
    if dataset is None or len(dataset) == 0:
        raise ContractError("evaluate() needs a non-empty dataset")
    return _error_rate(linear_forward(model_or_problem, dw, dataset.inputs), dataset.labels)


def evaluate_nonlinear(model: TangentModel, w, dataset) -> float:
    """Classification error of the nonlinear network at weights w."""
    if len(dataset) == 0:
        raise ContractError("evaluate_nonlinear() needs a non-empty dataset")
    return _error_rate(forward(model, dataset.inputs, w), dataset.labels)


def _nonlinear_objective(spec, w, inputs, labels, config: OptimizerConfig):
    """Loss and its output cotangent (already divided by the batch size)."""
    outputs = forward(spec, inputs, w)
    n, c = outputs.shape
    targets = one_hot(labels, c)
    if config.loss == "cross-entropy":
        log_probs = scipy.special.log_softmax(outputs, axis=1)
        value = float(-np.sum(targets * log_probs) / n)
        cot = (np.exp(log_probs) - targets) / n
    else:
        resid = outputs - config.alpha * targets
        value = float(np.sum(resid * resid) / (2.0 * n))
        cot = resid / n
    return value, cot


def train_nonlinear(spec, w0, dataset, config: OptimizerConfig,
                    on_step: Optional[StepCallback] = None,
                    stop_rule: Optional[StopRule] = None,
                    span: Optional[slice] = None) -> Trajectory:
    """
    Reference SGD-with-momentum fine-tuning of the nonlinear network.

    Weight decay enters the loss as (weight_decay / 2) ||w||^2. One record
    is kept per epoch with the full-dataset loss. With `span` only those
    parameters move (span = last Dense block is standard FC fine-tuning).

    Args:
        spec: NetworkSpec
        w0: Starting ParamVector
        dataset: LabeledDataset with labels in [0, C)
        config: OptimizerConfig; preconditioner must be "none" or "adam"
        on_step: Called with every epoch record
        stop_rule: Called at every epoch end with (epoch, w - w0)
        span: Trainable slice of the flat vector; everything by default

    Returns:
        Trajectory whose final_dw is w - w0
    """
    if config.preconditioner not in (NONE, ADAM):
        raise ContractError("the nonlinear trainer supports the 'none' and 'adam' preconditioners only")
    n = len(dataset)
    b = config.resolved_batch(n)
    preconditioner = create_preconditioner(
        config.preconditioner,
        **({"beta1": config.adam_beta1, "beta2": config.adam_beta2, "eps": config.adam_eps}
           if config.preconditioner == ADAM else {}),
    )
    base = as_delta(w0, spec.num_params)
    mask = np.zeros(spec.num_params)
    mask[slice(0, spec.num_params) if span is None else span] = 1.0
    w = base.copy()
    w_prev = w.copy()
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    records: List[StepRecord] = []

    def full_objective(weights):
        value, cot = _nonlinear_objective(spec, weights, dataset.inputs, dataset.labels, config)
        grad = mask * (vjp(spec, dataset.inputs, cot, weights) + config.weight_decay * weights)
        return value + 0.5 * config.weight_decay * float(weights @ weights), float(np.linalg.norm(grad))

    def record(step: int, epoch: int):
        value, grad_norm = full_objective(w)
        entry = StepRecord(step=step, epoch=epoch, loss=value, grad_norm=grad_norm,
                           wall_ms=(time.perf_counter() - start) * 1000.0)
        records.append(entry)
        if on_step is not None:
            on_step(entry)
        return entry

    initial = record(0, 0)
    step = 0
    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        for idx in _batches(n, b, rng):
            _, cot = _nonlinear_objective(spec, w, dataset.inputs[idx], dataset.labels[idx], config)
            grad = mask * (vjp(spec, dataset.inputs[idx], cot, w) + config.weight_decay * w)
            w_next = w - config.learning_rate(step) * preconditioner.apply(grad) + config.momentum * (w - w_prev)
            w_prev, w = w, w_next
            step += 1
        entry = record(step, epoch)
        _check_divergence(step, entry.loss, initial.loss)
        if entry.grad_norm < config.stop_tolerance * initial.grad_norm:
            stop_reason = "tolerance"
            break
        if stop_rule is not None and stop_rule(epoch, w - base):
            stop_reason = "stop_rule"
            break

    logger.info(f"Nonlinear training stopped after {step} steps ({stop_reason}), loss={records[-1].loss:.6e}")
    final = w - base
    final.setflags(write=False)
    return Trajectory(records=tuple(records), final_dw=final, steps=step, stop_reason=stop_reason)
