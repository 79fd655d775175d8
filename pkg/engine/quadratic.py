"""
The linearized training problem and its exact quadratic algebra.

Convention used everywhere in the engine:

    L(dw) = (1/(2N)) ||J dw - r||^2 + (lambda/2) ||dw||^2
    F     = (1/N) J^T J
    H     = F + lambda I
    dw*   = H^-1 (1/N) J^T r

J stacks the per-sample Jacobians (sample i owns rows [iC, (i+1)C)) and
r stacks the residual targets alpha * onehot(y_i) - f0(x_i).
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import ContractError, GuardError, NumericError, SingularSystemError
from .network import LINEARIZE_ALL, as_delta, batch_jacobian, forward, parameter_span

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 15.0

# Largest D for which a D x D matrix is materialized
DENSE_GUARD = 20000

JITTER_SCALE = 1e-10


def check_guard(d: int, what: str) -> None:
    if d > DENSE_GUARD:
        raise GuardError(f"refusing to materialize {what}: D={d} exceeds the guard of {DENSE_GUARD}")


@dataclass(frozen=True)
class LinearizedProblem:
    """
    The whole quadratic objective of a linearized fine-tuning run.

    Args:
        J: (N*C, D) stacked Jacobians
        r: (N*C,) stacked residual targets
        num_samples: N
        num_classes: C
        lam: Weight decay lambda >= 0
        alpha: Target scaling alpha > 0
        f0: Optional (N, C) base outputs, needed to score the problem directly
        labels: Optional (N,) labels
    """

    J: np.ndarray
    r: np.ndarray
    num_samples: int
    num_classes: int
    lam: float
    alpha: float = DEFAULT_ALPHA
    f0: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        J = np.array(self.J, dtype=np.float64)
        r = np.array(self.r, dtype=np.float64).ravel()
        n, c = int(self.num_samples), int(self.num_classes)
        if n < 1 or c < 1:
            raise ContractError("a problem needs at least one sample and one class")
        if J.ndim != 2 or J.shape[0] != n * c:
            raise ContractError(f"J has shape {J.shape}, expected ({n * c}, D)")
        if r.size != n * c:
            raise ContractError(f"r has {r.size} entries, expected {n * c}")
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if self.alpha <= 0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(r))):
            raise NumericError("problem contains non-finite values")
        for arr in (J, r):
            arr.setflags(write=False)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "num_samples", n)
        object.__setattr__(self, "num_classes", c)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.f0 is not None:
            object.__setattr__(self, "f0", np.asarray(self.f0, dtype=np.float64).reshape(n, c))
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).ravel())

    @property
    def dim(self) -> int:
        """Parameter count D."""
        return self.J.shape[1]

    def rows(self, i: int) -> slice:
        """Row span of sample i inside J and r."""
        if not 0 <= i < self.num_samples:
            raise ContractError(f"sample index {i} out of range [0, {self.num_samples})")
        c = self.num_classes
        return slice(i * c, (i + 1) * c)

    def sample_jacobian(self, i: int) -> np.ndarray:
        """g_i, the (C, D) Jacobian block of sample i."""
        return self.J[self.rows(i)]

    def sample_targets(self, i: int) -> np.ndarray:
        return self.r[self.rows(i)]

    def with_lambda(self, lam: float) -> "LinearizedProblem":
        return replace(self, lam=lam)

    def subset(self, indices: Sequence[int]) -> "LinearizedProblem":
        """Problem restricted to samples `indices` (in that order), lambda unchanged."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            raise ContractError("cannot build a problem with no samples")
        c = self.num_classes
        rows = (indices[:, None] * c + np.arange(c)[None, :]).ravel()
        return LinearizedProblem(
            J=self.J[rows], r=self.r[rows], num_samples=indices.size, num_classes=c,
            lam=self.lam, alpha=self.alpha,
            f0=None if self.f0 is None else self.f0[indices],
            labels=None if self.labels is None else self.labels[indices],
        )

    def without_sample(self, i: int) -> "LinearizedProblem":
        """The (N-1)-sample problem with sample i's rows removed."""
        self.rows(i)
        if self.num_samples < 2:
            raise ContractError("removing a sample requires N >= 2")
        keep = np.delete(np.arange(self.num_samples), i)
        return self.subset(keep)

    def outputs(self, dw) -> np.ndarray:
        """Tangent-model outputs f0 + J dw on the training samples, shape (N, C)."""
        if self.f0 is None:
            raise ContractError("problem was assembled without f0; outputs are unavailable")
        dw = as_delta(dw, self.dim)
        return self.f0 + (self.J @ dw).reshape(self.num_samples, self.num_classes)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def assemble(model, data, alpha: float = DEFAULT_ALPHA, lam: float = 0.0,
             scope: str = LINEARIZE_ALL) -> LinearizedProblem:
    """
    Build the linearized problem of a model on a labeled dataset.

    Args:
        model: TangentModel
        data: LabeledDataset (labels in [0, C))
        alpha: Target scaling
        lam: Weight decay
        scope: "all", or "last-layer" to keep only the final Dense block's
               Jacobian columns (D shrinks to that block's size)

    Returns:
        LinearizedProblem with rows in dataset order
    """
    c = model.num_classes
    if len(data) == 0:
        raise ContractError("cannot assemble a problem from an empty dataset")
    if data.labels.min() < 0 or data.labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c})")

    f0 = forward(model, data.inputs)
    jac = batch_jacobian(model, data.inputs)[:, :, parameter_span(model.spec, scope)]
    targets = alpha * one_hot(data.labels, c)
    logger.debug(f"Assembled problem: N={len(data)}, C={c}, D={jac.shape[2]} ({scope})")
    return LinearizedProblem(
        J=jac.reshape(len(data) * c, -1),
        r=(targets - f0).ravel(),
        num_samples=len(data), num_classes=c, lam=lam, alpha=alpha,
        f0=f0, labels=data.labels,
    )


def loss(problem: LinearizedProblem, dw) -> float:
    """L(dw) = (1/(2N)) ||J dw - r||^2 + (lambda/2) ||dw||^2."""
    dw = as_delta(dw, problem.dim)
    resid = problem.J @ dw - problem.r
    return float(resid @ resid / (2.0 * problem.num_samples) + 0.5 * problem.lam * (dw @ dw))


def gradient(problem: LinearizedProblem, dw) -> np.ndarray:
    """grad L = (1/N) J^T (J dw - r) + lambda dw."""
    dw = as_delta(dw, problem.dim)
    return problem.J.T @ (problem.J @ dw - problem.r) / problem.num_samples + problem.lam * dw


def fisher(problem: LinearizedProblem) -> np.ndarray:
    """F = (1/N) J^T J, exactly symmetric."""
    check_guard(problem.dim, "the Fisher matrix")
    full = problem.J.T @ problem.J / problem.num_samples
    upper = np.triu(full)
    return upper + np.triu(full, 1).T


def exact_hessian(problem: LinearizedProblem) -> np.ndarray:
    """
    H = F + lambda I, materialized.

    The upper triangle is computed and mirrored, so H is symmetric bit for bit.
    """
    h = fisher(problem)
    h[np.diag_indices_from(h)] += problem.lam
    return h


def cholesky_factor(h: np.ndarray, what: str = "H"):
    """
    Cholesky factor of an SPD matrix with one jitter retry.

    Returns:
        scipy cho_factor tuple
    """
    try:
        return scipy.linalg.cho_factor(h, lower=True)
    except np.linalg.LinAlgError:
        jitter = JITTER_SCALE * np.trace(h) / h.shape[0]
        logger.warning(f"Cholesky of {what} failed; retrying with jitter {jitter:.3e}")
        try:
            return scipy.linalg.cho_factor(h + jitter * np.eye(h.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            rank = int(np.linalg.matrix_rank(h))
            raise SingularSystemError(f"{what} is not positive definite", rank=rank)


def closed_form(problem: LinearizedProblem) -> np.ndarray:
    """
    Unique global optimum dw* = (F + lambda I)^-1 (1/N) J^T r.

    Args:
        problem: LinearizedProblem

    Returns:
        dw* as a flat (D,) vector
    """
    h = exact_hessian(problem)
    if problem.lam == 0.0:
        rank = int(np.linalg.matrix_rank(problem.J))
        if rank < problem.dim:
            raise SingularSystemError(
                f"lambda = 0 and J is rank deficient ({rank} < D={problem.dim})", rank=rank
            )
    factor = cholesky_factor(h)
    rhs = problem.J.T @ problem.r / problem.num_samples
    return scipy.linalg.cho_solve(factor, rhs)


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues in descending order and their max/min ratio."""

    eigenvalues: np.ndarray
    condition_number: float

    @property
    def max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def min(self) -> float:
        return float(self.eigenvalues[-1])


def spectrum(h) -> Spectrum:
    """
    Full symmetric eigendecomposition of a curvature matrix.

    Args:
        h: Symmetric matrix

    Returns:
        Spectrum with descending eigenvalues; condition_number is inf when
        the smallest eigenvalue is not positive
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ContractError(f"spectrum() needs a square matrix, got shape {h.shape}")
    scale = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
    if np.max(np.abs(h - h.T), initial=0.0) > 1e-12 * scale:
        raise ContractError("spectrum() needs a symmetric matrix")
    evals = scipy.linalg.eigh(h, eigvals_only=True)[::-1]
    kappa = float(evals[0] / evals[-1]) if evals[-1] > 0 else float("inf")
    return Spectrum(eigenvalues=evals, condition_number=kappa)
