"""
Preconditioners for the linearized trainer.

A preconditioner maps a gradient g_t to the search direction A_t g_t. The
trainer never needs to know which one it holds, so swapping plain SGD for
K-FAC or Adam is a configuration change.
"""

import logging
from abc import ABC, abstractmethod
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ContractError
from .kfac import KfacState
from .quadratic import LinearizedProblem, check_guard, cholesky_factor, exact_hessian

logger = logging.getLogger(__name__)

NONE = "none"
KFAC = "kfac"
EXACT_INVERSE = "exact-inverse"
ADAM = "adam"
PRECONDITIONERS = (NONE, KFAC, EXACT_INVERSE, ADAM)


class Preconditioner(ABC):
    """
    Abstract base class for gradient preconditioners.

    Constant preconditioners also expose their matrix so the convergence
    prediction and stability bound can be computed for them.
    """

    name = "abstract"

    @abstractmethod
    def apply(self, grad: np.ndarray) -> np.ndarray:
        """
        Turn a gradient into a search direction.

        Args:
            grad: (D,) gradient of the training loss

        Returns:
            (D,) direction A_t g_t
        """
        pass

    def reset(self) -> None:
        """Forget any state accumulated across steps."""
        pass

    @property
    def is_constant(self) -> bool:
        return True

    def dense_matrix(self, dim: int) -> np.ndarray:
        """
        Materialize A as a D x D matrix by applying it to the identity.

        Args:
            dim: Parameter count D

        Returns:
            Symmetric D x D matrix
        """
        if not self.is_constant:
            raise ContractError(f"preconditioner '{self.name}' changes every step and has no fixed matrix")
        check_guard(dim, f"the {self.name} preconditioner")
        columns = np.stack([self.apply(e) for e in np.eye(dim)], axis=1)
        return 0.5 * (columns + columns.T)


class IdentityPreconditioner(Preconditioner):
    """Plain gradient descent, A = I."""

    name = NONE

    def apply(self, grad: np.ndarray) -> np.ndarray:
        return np.array(grad, dtype=np.float64)

    def dense_matrix(self, dim: int) -> np.ndarray:
        check_guard(dim, "the identity preconditioner")
        return np.eye(dim)


class KfacPreconditioner(Preconditioner):
    """A = damped K-FAC inverse, estimated once and held constant."""

    name = KFAC

    def __init__(self, state: KfacState):
        if not state.frozen:
            raise ContractError("the K-FAC preconditioner needs an estimated state")
        self.state = state

    def apply(self, grad: np.ndarray) -> np.ndarray:
        return self.state.apply_inverse(grad)


class ExactInversePreconditioner(Preconditioner):
    """A = H^-1 through a Cholesky factorization; Newton's method on the quadratic."""

    name = EXACT_INVERSE

    def __init__(self, problem: LinearizedProblem):
        self.hessian = exact_hessian(problem)
        self._factor = cholesky_factor(self.hessian)

    def apply(self, grad: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._factor, grad)

    def dense_matrix(self, dim: int) -> np.ndarray:
        inverse = scipy.linalg.cho_solve(self._factor, np.eye(dim))
        return 0.5 * (inverse + inverse.T)


class AdamPreconditioner(Preconditioner):
    """
    Adam's bias-corrected moment ratio as a direction.

    Args:
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator floor
    """

    name = ADAM

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ContractError("Adam betas must lie in [0, 1)")
        if eps <= 0:
            raise ContractError("Adam eps must be > 0")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.reset()

    def reset(self) -> None:
        self._m: Optional[np.ndarray] = None
        self._v: Optional[np.ndarray] = None
        self._t = 0

    @property
    def is_constant(self) -> bool:
        return False

    def apply(self, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=np.float64)
        if self._m is None:
            self._m = np.zeros_like(grad)
            self._v = np.zeros_like(grad)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1 ** self._t)
        v_hat = self._v / (1.0 - self.beta2 ** self._t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def create_preconditioner(kind: str, problem: Optional[LinearizedProblem] = None,
                          kfac: Optional[KfacState] = None, **kwargs) -> Preconditioner:
    """
    Factory function selecting a preconditioner by name.

    Args:
        kind: "none", "kfac", "exact-inverse" or "adam"
        problem: Needed by "exact-inverse"
        kfac: Estimated state, needed by (and only accepted with) "kfac"
        **kwargs: Adam hyper-parameters (beta1, beta2, eps)

    Returns:
        Preconditioner instance
    """
    if kind not in PRECONDITIONERS:
        raise ContractError(f"unknown preconditioner '{kind}', expected one of {PRECONDITIONERS}")
    if (kind == KFAC) != (kfac is not None):
        raise ContractError("a K-FAC state must be supplied exactly when the preconditioner is 'kfac'")
    if kind == NONE:
        return IdentityPreconditioner()
    if kind == KFAC:
        return KfacPreconditioner(kfac)
    if kind == EXACT_INVERSE:
        if problem is None:
            raise ContractError("the exact-inverse preconditioner needs the problem")
        return ExactInversePreconditioner(problem)
    return AdamPreconditioner(**kwargs)
