"""
Leave-one-out influence on the linearized problem.

Removing sample i turns the quadratic into the (N-1)-sample problem with

    H_-i            = A - (1/(N-1)) g_i^T g_i,   A = (N/(N-1)) F + lambda I
    grad L_-i(w*)   = (N/(N-1)) g_i^T e_i - (lambda/(N-1)) w*
    e_i             = (1/N) (r_i - g_i w*)

The objective is quadratic, so one Newton step from w* lands exactly on the
leave-one-out optimum: w*_-i = w* - H_-i^-1 grad L_-i(w*). H_-i^-1 comes from
a rank-C Woodbury update of A^-1, and A^-1 from an InverseProvider (exact
Cholesky, or the damped K-FAC approximation).
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.stats

from .errors import ContractError, SingularSystemError
from .kfac import KfacState
from .network import as_delta
from .quadratic import LinearizedProblem, closed_form, cholesky_factor, fisher, gradient
from .trainer import evaluate

logger = logging.getLogger(__name__)

EXACT = "exact-hessian"
KFAC_APPROX = "kfac-approx"
BRUTE_FORCE = "brute-force"
METHODS = (EXACT, KFAC_APPROX, BRUTE_FORCE)

DROP_TOP = "drop-top"
DROP_BOTTOM = "drop-bottom"

CONVERGENCE_TOL = 1e-8


# ---------------------------------------------------------------------------
# Inverse providers
# ---------------------------------------------------------------------------


class InverseProvider(ABC):
    """Applies A^-1 = ((N/(N-1)) F + lambda I)^-1 of a fixed problem."""

    method = "abstract"

    @abstractmethod
    def solve(self, v: np.ndarray) -> np.ndarray:
        """
        Multiply by A^-1.

        Args:
            v: (D,) vector or (D, k) matrix

        Returns:
            Array of the same shape
        """
        pass


class ExactInverse(InverseProvider):
    """Cholesky factorization of the dense A."""

    method = EXACT

    def __init__(self, problem: LinearizedProblem):
        n = problem.num_samples
        if n < 2:
            raise ContractError("leave-one-out needs N >= 2")
        a = fisher(problem) * (n / (n - 1.0))
        a[np.diag_indices_from(a)] += problem.lam
        self._factor = cholesky_factor(a, "A")

    def solve(self, v: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._factor, v)


class KfacInverse(InverseProvider):
    """A^-1 ~= ((N-1)/N) (F_kfac + damping)^-1."""

    method = KFAC_APPROX

    def __init__(self, problem: LinearizedProblem, state: KfacState):
        if state.dim != problem.dim:
            raise ContractError(f"K-FAC state has D={state.dim}, problem has D={problem.dim}")
        n = problem.num_samples
        if n < 2:
            raise ContractError("leave-one-out needs N >= 2")
        self.state = state
        self._scale = (n - 1.0) / n

    def solve(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 1:
            return self._scale * self.state.apply_inverse(v)
        return self._scale * np.stack([self.state.apply_inverse(col) for col in v.T], axis=1)


def create_inverse_provider(kind: str, problem: LinearizedProblem,
                            kfac: Optional[KfacState] = None) -> InverseProvider:
    """
    Factory function for the A^-1 used by influence computations.

    Args:
        kind: "exact" / "exact-hessian" or "kfac" / "kfac-approx"
        problem: LinearizedProblem
        kfac: Estimated KfacState, required for the kfac kind

    Returns:
        InverseProvider
    """
    if kind in ("exact", EXACT):
        return ExactInverse(problem)
    if kind in ("kfac", KFAC_APPROX):
        if kfac is None:
            raise ContractError("the kfac inverse provider needs an estimated K-FAC state")
        return KfacInverse(problem, kfac)
    raise ContractError(f"unknown inverse provider '{kind}', expected 'exact' or 'kfac'")


# ---------------------------------------------------------------------------
# Leave-one-out algebra
# ---------------------------------------------------------------------------


def residuals(problem: LinearizedProblem, wstar) -> np.ndarray:
    """e_i = (1/N)(r_i - g_i w*) for every sample, shape (N, C)."""
    wstar = as_delta(wstar, problem.dim)
    resid = (problem.r - problem.J @ wstar) / problem.num_samples
    return resid.reshape(problem.num_samples, problem.num_classes)


def check_converged(problem: LinearizedProblem, wstar) -> None:
    """Refuse a w* whose gradient is not negligible."""
    grad = np.linalg.norm(gradient(problem, wstar))
    scale = np.linalg.norm(problem.J.T @ problem.r) / problem.num_samples
    if grad > CONVERGENCE_TOL * max(scale, 1.0):
        raise ContractError(f"w* is not converged: gradient norm {grad:.3e}")


def _removal_gradient(problem: LinearizedProblem, wstar: np.ndarray, i: int) -> np.ndarray:
    n = problem.num_samples
    g = problem.sample_jacobian(i)
    e = (problem.sample_targets(i) - g @ wstar) / n
    return (n / (n - 1.0)) * (g.T @ e) - (problem.lam / (n - 1.0)) * wstar


def _woodbury_solve(problem: LinearizedProblem, provider: InverseProvider, i: int,
                    v: np.ndarray) -> np.ndarray:
    """H_-i^-1 v through A^-1 + A^-1 g^T ((N-1) I - g A^-1 g^T)^-1 g A^-1."""
    n = problem.num_samples
    g = problem.sample_jacobian(i)
    a_inv_v = provider.solve(v)
    a_inv_gt = provider.solve(g.T)
    middle = (n - 1.0) * np.eye(problem.num_classes) - g @ a_inv_gt
    try:
        correction = scipy.linalg.solve(middle, g @ a_inv_v, assume_a="sym")
    except (np.linalg.LinAlgError, ValueError):
        raise SingularSystemError(f"removing sample {i} leaves a singular system",
                                  rank=int(np.linalg.matrix_rank(middle)))
    if not np.all(np.isfinite(correction)):
        raise SingularSystemError(f"removing sample {i} leaves a singular system")
    return a_inv_v + a_inv_gt @ correction


def loo_step(problem: LinearizedProblem, wstar, i: int, provider: InverseProvider) -> np.ndarray:
    """
    The exact shift w* - w*_-i of the optimum when sample i is removed.

    Args:
        problem: LinearizedProblem with N >= 2
        wstar: Converged optimum
        i: Sample index
        provider: A^-1 provider

    Returns:
        (D,) vector
    """
    if problem.num_samples < 2:
        raise ContractError("leave-one-out needs N >= 2")
    problem.rows(i)
    wstar = as_delta(wstar, problem.dim)
    return _woodbury_solve(problem, provider, i, _removal_gradient(problem, wstar, i))


def loo_weights(problem: LinearizedProblem, wstar, i: int, provider: InverseProvider) -> np.ndarray:
    """Optimum of the problem without sample i, without re-solving it."""
    wstar = as_delta(wstar, problem.dim)
    return wstar - loo_step(problem, wstar, i, provider)


def brute_force_loo(problem: LinearizedProblem, i: int) -> np.ndarray:
    """Re-solve the (N-1)-sample problem from scratch."""
    return closed_form(problem.without_sample(i))


def _as_test_jacobians(g_test, dim: int) -> Tuple[np.ndarray, bool]:
    g_test = np.asarray(g_test, dtype=np.float64)
    single = g_test.ndim == 2
    batch = g_test[None] if single else g_test
    if batch.ndim != 3 or batch.shape[2] != dim:
        raise ContractError(f"test Jacobians have shape {g_test.shape}, expected (C, {dim}) or (M, C, {dim})")
    return batch, single


def activation_delta(problem: LinearizedProblem, wstar, i: int, g_test,
                     provider: InverseProvider) -> np.ndarray:
    """
    Change f_w*(x_test) - f_w*_-i(x_test) of the test outputs.

    Args:
        problem: LinearizedProblem
        wstar: Converged optimum
        i: Removed sample
        g_test: (C, D) Jacobian of one test point, or (M, C, D) for M points
        provider: A^-1 provider

    Returns:
        (C,) delta, or (M, C) for a batch
    """
    batch, single = _as_test_jacobians(g_test, problem.dim)
    deltas = batch @ loo_step(problem, wstar, i, provider)
    return deltas[0] if single else deltas


def sherman_morrison_delta(problem: LinearizedProblem, wstar, i: int, g_test,
                           provider: InverseProvider) -> float:
    """
    Single-output activation delta through the scalar Sherman-Morrison update.

    With kappa = g_i A^-1 g_i^T and k = g_test A^-1 g_i^T the delta reads

        (N/(N-1-kappa)) e_i k - (lambda/(N-1)) g_test H_-i^-1 w*

    Args:
        problem: Problem with C = 1
        g_test: (D,) or (1, D) test Jacobian

    Returns:
        Scalar delta
    """
    if problem.num_classes != 1:
        raise ContractError("the scalar Sherman-Morrison path needs C = 1")
    n = problem.num_samples
    if n < 2:
        raise ContractError("leave-one-out needs N >= 2")
    wstar = as_delta(wstar, problem.dim)
    g = problem.sample_jacobian(i)[0]
    gt = as_delta(g_test, problem.dim)
    a_inv_g = provider.solve(g)
    kappa = float(g @ a_inv_g)
    k = float(gt @ a_inv_g)
    denom = n - 1.0 - kappa
    if denom == 0.0:
        raise SingularSystemError(f"removing sample {i} leaves a singular system")
    e = float(problem.sample_targets(i)[0] - g @ wstar) / n
    value = (n / (n - 1.0)) * ((n - 1.0) / denom) * e * k
    if problem.lam:
        a_inv_w = provider.solve(wstar)
        value -= (problem.lam / (n - 1.0)) * (float(gt @ a_inv_w) + k * float(g @ a_inv_w) / denom)
    return value


def fsi(problem: LinearizedProblem, wstar, i: int, g_val, provider: InverseProvider) -> float:
    """
    Functional sample information: mean squared validation activation delta.

    Args:
        g_val: (M, C, D) Jacobians of the validation points, M >= 1

    Returns:
        Non-negative score
    """
    batch, _ = _as_test_jacobians(g_val, problem.dim)
    if batch.shape[0] == 0:
        raise ContractError("F-SI needs a non-empty validation set")
    deltas = batch @ loo_step(problem, wstar, i, provider)
    return float(np.mean(np.sum(deltas ** 2, axis=1)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InfluenceReport:
    """
    Per-sample influence of a whole training set.

    Args:
        method: "exact-hessian", "kfac-approx" or "brute-force"
        weight_delta_norm: (N,) ||w*_-i - w*||
        activation_deltas: (N, M, C) test activation deltas (M may be 0)
        fsi: (N,) F-SI scores on the validation Jacobians
        residuals: (N, C) residuals e_i
    """

    method: str
    weight_delta_norm: np.ndarray
    activation_deltas: np.ndarray
    fsi: np.ndarray
    residuals: np.ndarray

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown influence method '{self.method}'")
        if np.any(self.fsi < 0):
            raise ContractError("F-SI scores must be non-negative")

    @property
    def num_samples(self) -> int:
        return self.fsi.size

    def ranking(self) -> np.ndarray:
        """Sample indices by decreasing F-SI, ties broken by lower index."""
        return np.argsort(-self.fsi, kind="stable")

    def rows(self) -> List[dict]:
        return [
            {"sample_id": i, "fsi": float(self.fsi[i]),
             "weight_delta_norm": float(self.weight_delta_norm[i]), "method": self.method}
            for i in range(self.num_samples)
        ]


def influence_report(problem: LinearizedProblem, wstar, g_val, g_test=None,
                     provider: Optional[InverseProvider] = None) -> InfluenceReport:
    """
    Influence of every training sample in one pass.

    Args:
        problem: LinearizedProblem
        wstar: Converged optimum
        g_val: (M_val, C, D) validation Jacobians for F-SI
        g_test: Optional (M_test, C, D) test Jacobians for activation deltas
        provider: A^-1 provider; None means brute-force re-solving

    Returns:
        InfluenceReport
    """
    wstar = as_delta(wstar, problem.dim)
    if provider is not None:
        check_converged(problem, wstar)
    val, _ = _as_test_jacobians(g_val, problem.dim)
    if val.shape[0] == 0:
        raise ContractError("F-SI needs a non-empty validation set")
    test = np.zeros((0, problem.num_classes, problem.dim)) if g_test is None \
        else _as_test_jacobians(g_test, problem.dim)[0]

    n = problem.num_samples
    norms = np.empty(n)
    scores = np.empty(n)
    deltas = np.empty((n, test.shape[0], test.shape[1]))
    for i in range(n):
        if provider is None:
            step = wstar - brute_force_loo(problem, i)
        else:
            step = loo_step(problem, wstar, i, provider)
        norms[i] = np.linalg.norm(step)
        scores[i] = np.mean(np.sum((val @ step) ** 2, axis=1))
        deltas[i] = test @ step
    method = BRUTE_FORCE if provider is None else provider.method
    logger.info(f"Influence report ({method}): N={n}, max F-SI={scores.max():.4e}")
    return InfluenceReport(method=method, weight_delta_norm=norms, activation_deltas=deltas,
                           fsi=scores, residuals=residuals(problem, wstar))


def rank_correlation(a: InfluenceReport, b: InfluenceReport) -> float:
    """Spearman correlation of two reports' F-SI scores."""
    if a.num_samples != b.num_samples:
        raise ContractError("reports cover different training sets")
    if a.num_samples < 2:
        return 1.0
    return float(scipy.stats.spearmanr(a.fsi, b.fsi).correlation)


@dataclass(frozen=True)
class SummaryResult:
    """Outcome of dropping the k highest- or lowest-scoring samples."""

    k: int
    mode: str
    removed: np.ndarray
    kept: np.ndarray
    wstar: np.ndarray
    test_error: float


def summarize(problem: LinearizedProblem, report: InfluenceReport, k: int, mode: str,
              test_problem: LinearizedProblem) -> SummaryResult:
    """
    Drop k samples ranked by F-SI, re-solve and score on a test problem.

    Args:
        problem: Training problem
        report: InfluenceReport of `problem`
        k: Samples to drop, 0 <= k < N
        mode: "drop-top" (most informative first) or "drop-bottom"
        test_problem: Problem assembled on the test set with f0 and labels

    Returns:
        SummaryResult
    """
    n = problem.num_samples
    if not 0 <= k < n:
        raise ContractError(f"k must lie in [0, {n}), got {k}")
    if mode not in (DROP_TOP, DROP_BOTTOM):
        raise ContractError(f"unknown summarize mode '{mode}'")
    if report.num_samples != n:
        raise ContractError("report does not match the problem")
    order = report.ranking()
    if mode == DROP_BOTTOM:
        # lowest scores first; ties still resolve to the lower index
        order = np.lexsort((np.arange(n), report.fsi))
    removed = np.sort(order[:k])
    kept = np.setdiff1d(np.arange(n), removed)
    wstar = closed_form(problem.subset(kept))
    error = evaluate(test_problem, wstar)
    logger.info(f"Summarize {mode} k={k}: test error {error:.4f}")
    return SummaryResult(k=k, mode=mode, removed=removed, kept=kept, wstar=wstar, test_error=error)
