"""
Weight-decay tuning on the linearized problem.

The optimum dw*(lambda) is unique for every lambda > 0, so a path of
lambdas can be walked by warm-starting each run from the previous
solution. Its validation loss is differentiable in lambda:

    d L_val / d lambda = -<dw*, (F + lambda I)^-1 grad L_val(dw*)>
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import ContractError
from .kfac import KfacState
from .network import as_delta
from .quadratic import LinearizedProblem, cholesky_factor, closed_form, exact_hessian, loss
from .trainer import OptimizerConfig, evaluate, train

logger = logging.getLogger(__name__)

FROM_SCRATCH = "from-scratch"
WARM_START = "warm-start"


@dataclass(frozen=True)
class LambdaPoint:
    """Solution of the problem at one lambda."""

    lam: float
    dw: np.ndarray
    train_loss: float
    val_loss: Optional[float]
    val_error: Optional[float]
    method: str
    iterations: int

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_error": self.val_error,
            "method": self.method,
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class LambdaPath:
    """Ordered solutions along a strictly monotone sequence of lambdas."""

    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        check_lambdas([p.lam for p in self.points])

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.points)

    def rows(self) -> List[dict]:
        return [p.to_dict() for p in self.points]


def check_lambdas(lambdas: Sequence[float]) -> np.ndarray:
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.ndim != 1 or lambdas.size == 0:
        raise ContractError("a lambda path needs at least one value")
    if np.any(lambdas <= 0):
        raise ContractError("every lambda on a path must be > 0")
    steps = np.diff(lambdas)
    if steps.size and not (np.all(steps > 0) or np.all(steps < 0)):
        raise ContractError("lambdas must be strictly monotone")
    return lambdas


def validation_loss(val_problem: LinearizedProblem, dw) -> float:
    """(1/(2M)) ||J_val dw - r_val||^2, without any weight decay."""
    return loss(val_problem.with_lambda(0.0), dw)


def _score(val_problem: Optional[LinearizedProblem], dw):
    if val_problem is None:
        return None, None
    error = evaluate(val_problem, dw) if val_problem.labels is not None and val_problem.f0 is not None else None
    return validation_loss(val_problem, dw), error


def _walk(problem: LinearizedProblem, lambdas, config: OptimizerConfig, kfac: Optional[KfacState],
          val_problem: Optional[LinearizedProblem], warm: bool) -> LambdaPath:
    lambdas = check_lambdas(lambdas)
    points = []
    previous = None
    for k, lam in enumerate(lambdas):
        current = problem.with_lambda(float(lam))
        start = previous if warm else None
        trajectory = train(current, config, kfac=kfac, w_start=start)
        dw = trajectory.final_dw
        val_loss, val_error = _score(val_problem, dw)
        method = WARM_START if warm and k > 0 else FROM_SCRATCH
        points.append(LambdaPoint(
            lam=float(lam), dw=dw, train_loss=trajectory.final_loss, val_loss=val_loss,
            val_error=val_error, method=method, iterations=trajectory.steps,
        ))
        logger.info(f"lambda={lam:.3e} ({method}): loss={trajectory.final_loss:.6e}, steps={trajectory.steps}")
        previous = dw
    return LambdaPath(points=tuple(points))


def warm_start_path(problem: LinearizedProblem, lambdas: Sequence[float], config: OptimizerConfig,
                    kfac: Optional[KfacState] = None,
                    val_problem: Optional[LinearizedProblem] = None) -> LambdaPath:
    """
    Fine-tune along a lambda path, each run starting from the previous solution.

    Args:
        problem: Training problem (its own lambda is ignored)
        lambdas: Strictly monotone positive values
        config: Trainer configuration used at every lambda
        kfac: Estimated state when config.preconditioner is "kfac"
        val_problem: Optional validation problem to score every point

    Returns:
        LambdaPath; the first point is trained from scratch
    """
    return _walk(problem, lambdas, config, kfac, val_problem, warm=True)


def cold_start_path(problem: LinearizedProblem, lambdas: Sequence[float], config: OptimizerConfig,
                    kfac: Optional[KfacState] = None,
                    val_problem: Optional[LinearizedProblem] = None) -> LambdaPath:
    """Same path with every point trained from scratch."""
    return _walk(problem, lambdas, config, kfac, val_problem, warm=False)


def lambda_gradient(problem: LinearizedProblem, val_problem: LinearizedProblem,
                    wstar=None, kfac: Optional[KfacState] = None) -> float:
    """
    Derivative of the validation loss of dw*(lambda) with respect to lambda.

    Args:
        problem: Training problem at the lambda of interest (> 0)
        val_problem: Validation problem assembled from the same model
        wstar: Optimum of `problem`; solved in closed form when omitted
        kfac: Use the damped K-FAC inverse instead of the exact one

    Returns:
        d L_val / d lambda
    """
    if problem.lam <= 0:
        raise ContractError("lambda_gradient needs lambda > 0")
    if val_problem.dim != problem.dim:
        raise ContractError("validation problem has a different parameter count")
    wstar = closed_form(problem) if wstar is None else as_delta(wstar, problem.dim)
    val_grad = val_problem.J.T @ (val_problem.J @ wstar - val_problem.r) / val_problem.num_samples
    if kfac is None:
        preconditioned = scipy.linalg.cho_solve(cholesky_factor(exact_hessian(problem)), val_grad)
    else:
        preconditioned = kfac.apply_inverse(val_grad)
    return -float(wstar @ preconditioned)


@dataclass(frozen=True)
class DescentStep:
    step: int
    lam: float
    val_loss: float
    gradient: float


def descend_lambda(problem: LinearizedProblem, val_problem: LinearizedProblem, lam0: float,
                   steps: int, step_size: float = 0.5) -> List[DescentStep]:
    """
    Gradient descent on log(lambda) against the validation loss.

    Each step solves the problem in closed form and moves
    log(lambda) by -step_size * lambda * dL_val/dlambda.

    Returns:
        One DescentStep per visited lambda (steps + 1 entries)
    """
    if lam0 <= 0:
        raise ContractError("lam0 must be > 0")
    if steps < 0:
        raise ContractError("steps must be >= 0")
    log_lam = np.log(lam0)
    history = []
    for step in range(steps + 1):
        lam = float(np.exp(log_lam))
        current = problem.with_lambda(lam)
        wstar = closed_form(current)
        grad = lambda_gradient(current, val_problem, wstar)
        history.append(DescentStep(step=step, lam=lam, val_loss=validation_loss(val_problem, wstar),
                                   gradient=grad))
        logger.debug(f"lambda descent step {step}: lambda={lam:.4e}, dL/dlambda={grad:.4e}")
        log_lam -= step_size * lam * grad
    return history
