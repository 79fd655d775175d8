"""
Kronecker-factored approximation of the linearized Fisher.

Each Dense layer l contributes one block F_l ~= G_l (x) A_l where

    A_l = E[a_bar a_bar^T]                 (layer input, bias coordinate appended)
    G_l = E_samples sum_c delta_c delta_c^T (output-basis backpropagated gradients)

The Kronecker order matches the row-major (out, in + 1) parameter block.
The linearized curvature never changes, so a state is estimated once and
then frozen; everything after that is read-only.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from .errors import ContractError, NumericError
from .network import Dense, FrozenNorm, TangentModel, as_delta, walk_backward
from .quadratic import LinearizedProblem, check_guard, fisher

logger = logging.getLogger(__name__)

FACTORED = "factored"
EIGEN = "eigen"
DAMPING_STYLES = (FACTORED, EIGEN)

DEFAULT_DAMPING_SCALE = 1e-3
CLAMP_TOL = 1e-10


def _clamped_eigh(m: np.ndarray, what: str):
    evals, evecs = scipy.linalg.eigh(m)
    if evals[0] < -CLAMP_TOL * max(1.0, abs(evals[-1])):
        raise NumericError(f"{what} is not PSD: smallest eigenvalue {evals[0]:.3e}")
    return np.clip(evals, 0.0, None), evecs


def _symmetric(m: np.ndarray) -> np.ndarray:
    upper = np.triu(m)
    return upper + np.triu(m, 1).T


@dataclass(frozen=True)
class KroneckerFactor:
    """
    Factor pair of one Dense layer.

    Args:
        layer_id: Index of the layer in the network spec
        offset: First parameter of the layer in the flat vector
        shape: (out, in [+ 1]) block shape
        A: Input second moment, shape[1] x shape[1]
        G: Output-gradient second moment, shape[0] x shape[0]
    """

    layer_id: int
    offset: int
    shape: Tuple[int, int]
    A: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        a_evals, a_evecs = _clamped_eigh(self.A, f"A factor of layer {self.layer_id}")
        g_evals, g_evecs = _clamped_eigh(self.G, f"G factor of layer {self.layer_id}")
        for name, value in (("a_evals", a_evals), ("a_evecs", a_evecs),
                            ("g_evals", g_evals), ("g_evecs", g_evecs)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        self.A.setflags(write=False)
        self.G.setflags(write=False)

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def span(self) -> slice:
        return slice(self.offset, self.offset + self.size)

    @property
    def trace(self) -> float:
        return float(np.trace(self.G) * np.trace(self.A))

    @property
    def balance(self) -> float:
        """pi = sqrt((tr(A) / dim A) / (tr(G) / dim G)), 1 when a factor vanishes."""
        mean_a = np.trace(self.A) / self.shape[1]
        mean_g = np.trace(self.G) / self.shape[0]
        if mean_a <= 0.0 or mean_g <= 0.0:
            return 1.0
        return float(np.sqrt(mean_a / mean_g))


@dataclass(frozen=True)
class ScalarGroup:
    """Parameters of a non-Dense layer, preconditioned by one scalar (mean diagonal Fisher)."""

    layer_id: int
    offset: int
    size: int
    value: float

    @property
    def span(self) -> slice:
        return slice(self.offset, self.offset + self.size)


class KfacState:
    """
    Frozen K-FAC curvature of a tangent model.

    A fresh state is empty; estimate() fills it exactly once. The inverse
    and dense views refuse to run before that.

    Args:
        damping: Tikhonov damping gamma > 0; 1e-3 times the mean eigenvalue
                 of the approximation when omitted
        damping_style: "factored" (pi-balanced split across the factors) or
                       "eigen" (exact damping of G (x) A in its eigenbasis)
    """

    def __init__(self, damping: Optional[float] = None, damping_style: str = FACTORED):
        if damping_style not in DAMPING_STYLES:
            raise ContractError(f"unknown damping style '{damping_style}', expected one of {DAMPING_STYLES}")
        if damping is not None and damping < 0:
            raise ContractError(f"damping must be >= 0, got {damping}")
        self.damping_style = damping_style
        self._requested_damping = damping
        self.damping: Optional[float] = None
        self.factors: Tuple[KroneckerFactor, ...] = ()
        self.groups: Tuple[ScalarGroup, ...] = ()
        self.dim = 0
        self.num_samples = 0
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def estimate(self, model: TangentModel, data) -> "KfacState":
        """
        Accumulate the factors over a dataset and freeze the state.

        Args:
            model: TangentModel with at least one Dense layer
            data: LabeledDataset (only the inputs are used)

        Returns:
            self, frozen
        """
        if self._frozen:
            raise ContractError("K-FAC state is already estimated; curvature is computed once per run")
        if not isinstance(model, TangentModel):
            raise ContractError("estimate() needs a TangentModel")
        inputs = data.inputs if hasattr(data, "inputs") else np.asarray(data, dtype=np.float64)
        n = inputs.shape[0]
        if n == 0:
            raise ContractError("cannot estimate K-FAC factors from an empty dataset")
        spec = model.spec
        if not spec.dense_layer_ids():
            raise ContractError("K-FAC needs at least one Dense layer")

        records = {record.layer_id: record for record in model.w0.layout}
        dense_stats = {}
        group_stats = {}

        def collect(layer_id, layer, a, cot):
            if isinstance(layer, Dense):
                a_bar = np.concatenate([a, np.ones((n, 1))], axis=1) if layer.bias else a
                A = a_bar.T @ a_bar / n
                G = np.einsum("nko,nkp->op", cot, cot) / n
                dense_stats[layer_id] = (_symmetric(A), _symmetric(G))
            elif isinstance(layer, FrozenNorm) and layer.trainable:
                x_hat = (a - np.asarray(layer.mean)) / np.sqrt(np.asarray(layer.var))
                diag = np.concatenate([
                    np.einsum("nkd->d", (cot * x_hat[:, None, :]) ** 2),
                    np.einsum("nkd->d", cot ** 2),
                ]) / n
                group_stats[layer_id] = float(diag.mean())

        walk_backward(model, inputs, collect)

        factors: List[KroneckerFactor] = []
        groups: List[ScalarGroup] = []
        for record in model.w0.layout:
            if record.layer_id in dense_stats:
                A, G = dense_stats[record.layer_id]
                factors.append(KroneckerFactor(record.layer_id, record.offset, tuple(record.shape), A, G))
            else:
                groups.append(ScalarGroup(record.layer_id, record.offset, record.size,
                                          group_stats.get(record.layer_id, 0.0)))
        self._install(factors, groups, model.num_params, n)
        logger.info(
            f"Estimated K-FAC factors for {len(factors)} Dense layer(s) on {n} samples, "
            f"damping={self.damping:.3e} ({self.damping_style})"
        )
        return self

    def _install(self, factors, groups, dim: int, num_samples: int) -> None:
        self.factors = tuple(factors)
        self.groups = tuple(groups)
        self.dim = int(dim)
        self.num_samples = int(num_samples)
        covered = sum(f.size for f in self.factors) + sum(g.size for g in self.groups)
        if covered != self.dim:
            raise ContractError(f"K-FAC blocks cover {covered} parameters, expected {self.dim}")
        if self._requested_damping is None:
            trace = sum(f.trace for f in self.factors) + sum(g.value * g.size for g in self.groups)
            self.damping = DEFAULT_DAMPING_SCALE * trace / self.dim
        else:
            self.damping = float(self._requested_damping)
        self._frozen = True

    @classmethod
    def from_factors(cls, factors, groups, dim: int, num_samples: int, damping: float,
                     damping_style: str = FACTORED) -> "KfacState":
        """Rebuild a frozen state from stored factors."""
        state = cls(damping=damping, damping_style=damping_style)
        state._install(factors, groups, dim, num_samples)
        return state

    def restricted(self, span: slice) -> "KfacState":
        """
        The blocks that lie inside `span`, re-based to start at zero.

        Used when only part of the network is linearized. The resolved
        damping carries over unchanged.

        Args:
            span: Contiguous slice of the flat parameter vector

        Returns:
            Frozen KfacState of dimension span.stop - span.start
        """
        self._require_frozen()
        start, stop = span.start, span.stop

        def inside(block) -> bool:
            return start <= block.span.start and block.span.stop <= stop

        for block in (*self.factors, *self.groups):
            if not inside(block) and block.span.start < stop and start < block.span.stop:
                raise ContractError(f"span [{start}, {stop}) cuts through the block of layer {block.layer_id}")
        factors = [replace(f, offset=f.offset - start) for f in self.factors if inside(f)]
        groups = [replace(g, offset=g.offset - start) for g in self.groups if inside(g)]
        return KfacState.from_factors(factors, groups, stop - start, self.num_samples, self.damping,
                                      self.damping_style)

    def _require_frozen(self):
        if not self._frozen:
            raise ContractError("K-FAC state has not been estimated yet")

    def _factor_dampings(self, factor: KroneckerFactor) -> Tuple[float, float]:
        root = np.sqrt(self.damping)
        pi = factor.balance
        return pi * root, root / pi

    def apply_inverse(self, v) -> np.ndarray:
        """
        Multiply a parameter delta by the damped K-FAC inverse.

        Args:
            v: Delta of length D

        Returns:
            (D,) vector
        """
        self._require_frozen()
        v = as_delta(v, self.dim)
        out = np.empty_like(v)
        for factor in self.factors:
            block = v[factor.span].reshape(factor.shape)
            ug, ua = factor.g_evecs, factor.a_evecs
            rotated = ug.T @ block @ ua
            if self.damping_style == FACTORED:
                damp_g, damp_a = self._factor_dampings(factor)
                denom = np.outer(factor.g_evals + damp_g, factor.a_evals + damp_a)
            else:
                denom = np.outer(factor.g_evals, factor.a_evals) + self.damping
            if np.any(denom <= 0.0):
                raise NumericError(f"K-FAC block of layer {factor.layer_id} is singular; increase damping")
            out[factor.span] = (ug @ (rotated / denom) @ ua.T).ravel()
        for group in self.groups:
            denom = group.value + self.damping
            if denom <= 0.0:
                raise NumericError(f"scalar group of layer {group.layer_id} is singular; increase damping")
            out[group.span] = v[group.span] / denom
        return out

    def dense_matrix(self) -> np.ndarray:
        """Undamped block-diagonal approximation F_kfac, D x D."""
        self._require_frozen()
        check_guard(self.dim, "the K-FAC matrix")
        out = np.zeros((self.dim, self.dim))
        for factor in self.factors:
            out[factor.span, factor.span] = np.kron(factor.G, factor.A)
        for group in self.groups:
            out[group.span, group.span] = group.value * np.eye(group.size)
        return _symmetric(out)

    def damped_dense_matrix(self) -> np.ndarray:
        """The matrix whose inverse apply_inverse multiplies by."""
        self._require_frozen()
        check_guard(self.dim, "the damped K-FAC matrix")
        out = np.zeros((self.dim, self.dim))
        for factor in self.factors:
            if self.damping_style == FACTORED:
                damp_g, damp_a = self._factor_dampings(factor)
                block = np.kron(factor.G + damp_g * np.eye(factor.shape[0]),
                                factor.A + damp_a * np.eye(factor.shape[1]))
            else:
                block = np.kron(factor.G, factor.A) + self.damping * np.eye(factor.size)
            out[factor.span, factor.span] = block
        for group in self.groups:
            out[group.span, group.span] = (group.value + self.damping) * np.eye(group.size)
        return _symmetric(out)


def estimate(model: TangentModel, data, damping: Optional[float] = None,
             damping_style: str = FACTORED) -> KfacState:
    """Estimate and freeze a K-FAC state in one call."""
    return KfacState(damping=damping, damping_style=damping_style).estimate(model, data)


def apply_inverse(state: KfacState, v) -> np.ndarray:
    return state.apply_inverse(v)


def dense_matrix(state: KfacState) -> np.ndarray:
    return state.dense_matrix()


def approximation_error(state: KfacState, problem: LinearizedProblem) -> float:
    """
    Relative Frobenius distance ||F_kfac - F|| / ||F|| to the exact Fisher.

    Args:
        state: Frozen KfacState
        problem: Problem assembled from the same model and data

    Returns:
        Non-negative error (0 when F vanishes and F_kfac matches it)
    """
    if state.dim != problem.dim:
        raise ContractError(f"K-FAC state has D={state.dim}, problem has D={problem.dim}")
    exact = fisher(problem)
    gap = np.linalg.norm(state.dense_matrix() - exact)
    scale = np.linalg.norm(exact)
    error = float(gap / scale) if scale > 0 else float(gap)
    logger.debug(f"K-FAC approximation error: {error:.3e}")
    return error
