"""
Pooling heads: global mean pooling and square-root bilinear pooling.

A pooling head reads its input vector as a feature map of shape (HW, C),
positions by channels, row-major. Mean pooling returns the channel means.
Bilinear pooling returns the principal square root of the channel
covariance

    Sigma = z^T A z,   A = (1/HW) (I - (1/HW) 11^T)

flattened row-major to C*C values. Both heads expose a forward value, a
tangent (JVP) and an adjoint (VJP) so the network can run paired
value/tangent passes and exact backward Jacobians through them.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError

logger = logging.getLogger(__name__)

# Eigenvalues in [-CLAMP_TOL, 0] are rounding noise and become 0
CLAMP_TOL = 1e-10

# Covariances with an eigenvalue below this are damped before differentiating
SINGULAR_TOL = 1e-8

SYLVESTER = "sylvester"
HALF_INVERSE = "half-inverse"
TANGENT_MODES = (SYLVESTER, HALF_INVERSE)


def _as_feature_map(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ContractError(f"feature map must be 2-D (HW x C), got shape {z.shape}")
    if z.shape[0] < 2:
        raise ContractError(f"bilinear pooling needs HW >= 2 positions, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise NumericError("feature map contains non-finite values")
    return z


def centering_matrix(n: int) -> np.ndarray:
    """Return A = (1/n)(I - (1/n) 11^T) for n positions."""
    return (np.eye(n) - np.full((n, n), 1.0 / n)) / n


def covariance(z) -> np.ndarray:
    """
    Channel covariance Sigma = z^T A z of a feature map.

    Args:
        z: Feature map, shape (HW, C)

    Returns:
        Symmetric (C, C) matrix
    """
    z = _as_feature_map(z)
    zc = z - z.mean(axis=0)
    sigma = zc.T @ zc / z.shape[0]
    return 0.5 * (sigma + sigma.T)


def covariance_tangent(z, dz) -> np.ndarray:
    """dSigma = dz^T A z + z^T A dz."""
    z = _as_feature_map(z)
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != z.shape:
        raise ContractError(f"tangent shape {dz.shape} does not match feature map {z.shape}")
    zc = z - z.mean(axis=0)
    dzc = dz - dz.mean(axis=0)
    return (dzc.T @ zc + zc.T @ dzc) / z.shape[0]


def _clamped_eigh(sigma: np.ndarray):
    evals, evecs = np.linalg.eigh(sigma)
    if evals[0] < -CLAMP_TOL:
        raise NumericError(
            f"covariance is not PSD: smallest eigenvalue {evals[0]:.3e} < {-CLAMP_TOL:.0e}"
        )
    return np.clip(evals, 0.0, None), evecs


def psd_sqrt(sigma) -> np.ndarray:
    """
    Principal square root of a symmetric PSD matrix via eigendecomposition.

    Args:
        sigma: Symmetric (C, C) matrix

    Returns:
        Symmetric PSD root R with R @ R == sigma
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    evals, evecs = _clamped_eigh(0.5 * (sigma + sigma.T))
    root = (evecs * np.sqrt(evals)) @ evecs.T
    return 0.5 * (root + root.T)


@dataclass(frozen=True)
class SqrtFactor:
    """
    Eigenbasis of the square-root covariance used to differentiate it.

    roots are the (possibly damped) square roots of Sigma's eigenvalues.
    """

    evecs: np.ndarray
    roots: np.ndarray
    damped: bool

    @classmethod
    def from_covariance(cls, sigma: np.ndarray, damping: bool = True) -> "SqrtFactor":
        evals, evecs = _clamped_eigh(sigma)
        damped = False
        if evals[0] < SINGULAR_TOL:
            if not damping:
                raise NumericError(
                    f"covariance is singular (smallest eigenvalue {evals[0]:.3e}); "
                    "its square root has no derivative"
                )
            logger.debug(f"Damping singular covariance by {SINGULAR_TOL:.0e} * I")
            evals = evals + SINGULAR_TOL
            damped = True
        return cls(evecs=evecs, roots=np.sqrt(evals), damped=damped)

    def solve_lyapunov(self, m: np.ndarray) -> np.ndarray:
        """Solve R X + X R = m in the eigenbasis of R."""
        u = self.evecs
        denom = self.roots[:, None] + self.roots[None, :]
        return u @ ((u.T @ m @ u) / denom) @ u.T

    def half_inverse(self, m: np.ndarray) -> np.ndarray:
        """Return (1/2) R^-1 m."""
        u = self.evecs
        return (u / (2.0 * self.roots)) @ (u.T @ m)

    def tangent(self, dsigma: np.ndarray, mode: str) -> np.ndarray:
        if mode == SYLVESTER:
            return self.solve_lyapunov(dsigma)
        if mode == HALF_INVERSE:
            return self.half_inverse(dsigma)
        raise ContractError(f"unknown tangent mode '{mode}', expected one of {TANGENT_MODES}")

    def cotangent(self, grad_out: np.ndarray, mode: str) -> np.ndarray:
        """Pull a cotangent on the root back to a cotangent on Sigma."""
        # Both maps are self-adjoint under the Frobenius inner product
        return self.tangent(grad_out, mode)


def bilinear_pool_forward(z) -> np.ndarray:
    """
    Square-root bilinear pooling of a feature map.

    Args:
        z: Feature map, shape (HW, C) with HW >= 2

    Returns:
        sqrt(Sigma), shape (C, C)
    """
    return psd_sqrt(covariance(z))


def bilinear_pool_tangent(z, dz, mode: str = SYLVESTER, damping: bool = True) -> np.ndarray:
    """
    Directional derivative of sqrt(Sigma(z)) along dz.

    The default mode solves the Frechet derivative of the matrix square root
    exactly through sqrt(Sigma) X + X sqrt(Sigma) = dSigma. The
    "half-inverse" mode returns (1/2) sqrt(Sigma)^-1 dSigma, which agrees
    only when sqrt(Sigma) and dSigma commute.

    Args:
        z: Feature map, shape (HW, C)
        dz: Tangent of the feature map, same shape
        mode: "sylvester" or "half-inverse"
        damping: Add 1e-8 * I to a singular Sigma instead of failing

    Returns:
        (C, C) tangent of the pooled output
    """
    sigma = covariance(z)
    factor = SqrtFactor.from_covariance(sigma, damping=damping)
    return factor.tangent(covariance_tangent(z, dz), mode)


def bilinear_pool_adjoint(z, grad_out, mode: str = SYLVESTER, damping: bool = True) -> np.ndarray:
    """
    Vector-Jacobian product of bilinear pooling.

    Args:
        z: Feature map, shape (HW, C)
        grad_out: Cotangent on the (C, C) output
        mode: Tangent mode, matched with bilinear_pool_tangent
        damping: As in bilinear_pool_tangent

    Returns:
        Cotangent on z, shape (HW, C)
    """
    z = _as_feature_map(z)
    zc = z - z.mean(axis=0)
    factor = SqrtFactor.from_covariance(covariance(z), damping=damping)
    sigma_bar = factor.cotangent(np.asarray(grad_out, dtype=np.float64), mode)
    return zc @ (sigma_bar + sigma_bar.T) / z.shape[0]


def pool_divergence(z, dz) -> float:
    """
    Relative Frobenius gap between the half-inverse and Sylvester tangents.

    Returns:
        ||T_half - T_sylvester||_F / ||T_sylvester||_F (0 when both vanish)
    """
    exact = bilinear_pool_tangent(z, dz, SYLVESTER)
    literal = bilinear_pool_tangent(z, dz, HALF_INVERSE)
    scale = np.linalg.norm(exact)
    if scale == 0.0:
        return float(np.linalg.norm(literal))
    return float(np.linalg.norm(literal - exact) / scale)


def mean_pool_forward(z) -> np.ndarray:
    """Global mean pooling over positions: (HW, C) -> (C,)."""
    return np.asarray(z, dtype=np.float64).mean(axis=0)
