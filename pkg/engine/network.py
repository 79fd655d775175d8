"""
Small feedforward networks and their tangent (linearized) models.

A network is described by a NetworkSpec (an ordered list of layer
descriptors) and a flat ParamVector laid out layer by layer. Around a frozen
point w0 the TangentModel evaluates

    f_lin(x) = f_w0(x) + J(x) . dw

either by materializing the Jacobian J(x) with an exact backward pass or,
without ever forming J, by pushing a paired (value, tangent) through every
layer (a forward-mode JVP).

Parameter layout conventions:
    - Dense layers own one block of shape (out, in + 1) when they carry a
      bias (the bias is the last column) and (out, in) otherwise. Rows are
      output units, so the block flattens row-major.
    - Trainable FrozenNorm layers own a (2, dim) block: scale row, shift row.
    - Every other layer owns no parameters.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import pooling
from .errors import ContractError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------------------
# Layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    """Affine layer z = W a + b."""

    in_dim: int
    out_dim: int
    bias: bool = True
    kind: str = field(default="dense", init=False)

    @property
    def block_shape(self) -> Tuple[int, int]:
        return (self.out_dim, self.in_dim + (1 if self.bias else 0))


@dataclass(frozen=True)
class Activation:
    """Leaky-ReLU with a fixed negative-branch slope."""

    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    kind: str = field(default="activation", init=False)


@dataclass(frozen=True)
class FrozenNorm:
    """
    Normalization with stored statistics, never batch statistics.

    y = scale * (x - mean) / sqrt(var) + shift. When trainable, scale and
    shift are taken from the parameter vector; the values stored here seed
    the initialization.
    """

    mean: Tuple[float, ...]
    var: Tuple[float, ...]
    scale: Tuple[float, ...]
    shift: Tuple[float, ...]
    trainable: bool = False
    kind: str = field(default="frozen_norm", init=False)

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class BilinearPool:
    """Square-root bilinear pooling head over `channels` channels."""

    channels: int
    tangent_mode: str = pooling.SYLVESTER
    kind: str = field(default="bilinear_pool", init=False)


@dataclass(frozen=True)
class MeanPool:
    """Global average pooling head over `channels` channels."""

    channels: int
    kind: str = field(default="mean_pool", init=False)


Layer = Union[Dense, Activation, FrozenNorm, BilinearPool, MeanPool]
POOLING_KINDS = ("bilinear_pool", "mean_pool")


def _layer_from_dict(entry: Dict) -> Layer:
    entry = dict(entry)
    kind = entry.pop("kind", None)
    try:
        if kind == "dense":
            return Dense(int(entry["in_dim"]), int(entry["out_dim"]), bool(entry.get("bias", True)))
        if kind == "activation":
            return Activation(float(entry.get("leaky_slope", DEFAULT_LEAKY_SLOPE)))
        if kind == "frozen_norm":
            return FrozenNorm(
                mean=tuple(float(v) for v in entry["mean"]),
                var=tuple(float(v) for v in entry["var"]),
                scale=tuple(float(v) for v in entry["scale"]),
                shift=tuple(float(v) for v in entry["shift"]),
                trainable=bool(entry.get("trainable", False)),
            )
        if kind == "bilinear_pool":
            return BilinearPool(int(entry["channels"]), entry.get("tangent_mode", pooling.SYLVESTER))
        if kind == "mean_pool":
            return MeanPool(int(entry["channels"]))
    except KeyError as e:
        raise ContractError(f"layer '{kind}' is missing field {e}")
    raise ContractError(f"unknown layer kind: {kind!r}")


def _layer_to_dict(layer: Layer) -> Dict:
    if isinstance(layer, Dense):
        return {"kind": layer.kind, "in_dim": layer.in_dim, "out_dim": layer.out_dim, "bias": layer.bias}
    if isinstance(layer, Activation):
        return {"kind": layer.kind, "leaky_slope": layer.leaky_slope}
    if isinstance(layer, FrozenNorm):
        return {
            "kind": layer.kind,
            "mean": list(layer.mean),
            "var": list(layer.var),
            "scale": list(layer.scale),
            "shift": list(layer.shift),
            "trainable": layer.trainable,
        }
    if isinstance(layer, BilinearPool):
        return {"kind": layer.kind, "channels": layer.channels, "tangent_mode": layer.tangent_mode}
    return {"kind": layer.kind, "channels": layer.channels}


# ---------------------------------------------------------------------------
# NetworkSpec and ParamVector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutRecord:
    """Where one layer's parameters live inside the flat vector."""

    layer_id: int
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class NetworkSpec:
    """
    Architecture of a small feedforward network.

    Args:
        layers: Ordered layer descriptors
        input_dim: Length of an input vector
        output_dim: Number of outputs (classes C)
    """

    layers: Tuple[Layer, ...]
    input_dim: int
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self._validate()

    def _validate(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ContractError("input_dim and output_dim must be positive")

        width = self.input_dim
        pool_index = None
        last_dense = None
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_dim != width:
                    raise ContractError(
                        f"layer {idx}: Dense expects {layer.in_dim} inputs but receives {width}"
                    )
                if layer.out_dim <= 0:
                    raise ContractError(f"layer {idx}: Dense out_dim must be positive")
                width = layer.out_dim
                last_dense = idx
            elif isinstance(layer, Activation):
                if not 0.0 < layer.leaky_slope < 1.0:
                    raise ContractError(f"layer {idx}: leaky_slope must lie in (0, 1), got {layer.leaky_slope}")
            elif isinstance(layer, FrozenNorm):
                if not (len(layer.var) == len(layer.scale) == len(layer.shift) == layer.dim):
                    raise ContractError(f"layer {idx}: FrozenNorm statistics have mismatched lengths")
                if layer.dim != width:
                    raise ContractError(f"layer {idx}: FrozenNorm has {layer.dim} channels but receives {width}")
                if min(layer.var) <= 0.0:
                    raise ContractError(f"layer {idx}: FrozenNorm variances must be > 0")
            elif isinstance(layer, (BilinearPool, MeanPool)):
                if pool_index is not None:
                    raise ContractError(f"layer {idx}: at most one pooling head is allowed")
                pool_index = idx
                if layer.channels <= 0 or width % layer.channels != 0:
                    raise ContractError(
                        f"layer {idx}: width {width} is not a multiple of {layer.channels} channels"
                    )
                positions = width // layer.channels
                if isinstance(layer, BilinearPool):
                    if positions < 2:
                        raise ContractError(f"layer {idx}: bilinear pooling needs at least 2 positions")
                    if layer.tangent_mode not in pooling.TANGENT_MODES:
                        raise ContractError(f"layer {idx}: unknown tangent_mode {layer.tangent_mode!r}")
                    width = layer.channels * layer.channels
                else:
                    width = layer.channels
            else:
                raise ContractError(f"layer {idx}: unsupported layer {layer!r}")

        if width != self.output_dim:
            raise ContractError(f"network produces {width} outputs but output_dim is {self.output_dim}")
        if pool_index is not None and (last_dense is None or last_dense < pool_index):
            raise ContractError("the pooling head must be placed before the final Dense layer")

    def widths(self) -> List[Tuple[int, int]]:
        """Return (input width, output width) for each layer."""
        result = []
        width = self.input_dim
        for layer in self.layers:
            if isinstance(layer, Dense):
                out = layer.out_dim
            elif isinstance(layer, BilinearPool):
                out = layer.channels * layer.channels
            elif isinstance(layer, MeanPool):
                out = layer.channels
            else:
                out = width
            result.append((width, out))
            width = out
        return result

    def layout(self) -> Tuple[LayoutRecord, ...]:
        """Parameter layout implied by the layers, in layer order."""
        records = []
        offset = 0
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shape = layer.block_shape
            elif isinstance(layer, FrozenNorm) and layer.trainable:
                shape = (2, layer.dim)
            else:
                continue
            records.append(LayoutRecord(idx, offset, tuple(shape)))
            offset += int(np.prod(shape))
        return tuple(records)

    @property
    def num_params(self) -> int:
        return sum(record.size for record in self.layout())

    def dense_layer_ids(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Dense)]

    def to_document(self) -> str:
        """Serialize to the textual (JSON) config document."""
        doc = {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layers": [_layer_to_dict(layer) for layer in self.layers],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_document(cls, text: str) -> "NetworkSpec":
        """Parse a document written by to_document()."""
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ContractError(f"network document is not valid JSON: {e}")
        return cls(
            layers=tuple(_layer_from_dict(entry) for entry in doc.get("layers", [])),
            input_dim=int(doc["input_dim"]),
            output_dim=int(doc["output_dim"]),
        )


@dataclass(frozen=True)
class ParamVector:
    """
    Flat parameter vector plus the layout that gives it structure.

    Args:
        values: Float64 vector of length D
        layout: One LayoutRecord per parameterized layer
    """

    values: np.ndarray
    layout: Tuple[LayoutRecord, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))

        expected = 0
        for record in self.layout:
            if record.offset != expected:
                raise ContractError(
                    f"layout record for layer {record.layer_id} starts at {record.offset}, expected {expected}"
                )
            expected += record.size
        if expected != values.size:
            raise ContractError(f"layout covers {expected} values but the vector has {values.size}")
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector contains non-finite values")

    @property
    def size(self) -> int:
        return self.values.size

    def block(self, layer_id: int) -> np.ndarray:
        """Read-only view of one layer's parameters in their natural shape."""
        for record in self.layout:
            if record.layer_id == layer_id:
                return self.values[record.offset:record.offset + record.size].reshape(record.shape)
        raise ContractError(f"layer {layer_id} owns no parameters")

    def shifted(self, dw) -> "ParamVector":
        """Return a new vector w + dw with the same layout."""
        dw = as_delta(dw, self.size)
        return ParamVector(self.values + dw, self.layout)

    def matches(self, spec: NetworkSpec) -> bool:
        return self.layout == spec.layout()


def as_delta(dw, size: int) -> np.ndarray:
    """Coerce a ParamVector or array-like into a flat float64 delta of length `size`."""
    if isinstance(dw, ParamVector):
        dw = dw.values
    dw = np.asarray(dw, dtype=np.float64).ravel()
    if dw.size != size:
        raise ContractError(f"parameter delta has length {dw.size}, expected {size}")
    return dw


LINEARIZE_ALL = "all"
LINEARIZE_LAST = "last-layer"
LINEARIZE_SCOPES = (LINEARIZE_ALL, LINEARIZE_LAST)


def parameter_span(spec: NetworkSpec, scope: str = LINEARIZE_ALL) -> slice:
    """
    Slice of the flat parameter vector that a linearization scope trains.

    "all" linearizes every parameter; "last-layer" keeps only the final Dense
    block and freezes everything below it.

    Args:
        spec: NetworkSpec
        scope: One of LINEARIZE_SCOPES

    Returns:
        Contiguous slice into the flat vector
    """
    if scope == LINEARIZE_ALL:
        return slice(0, spec.num_params)
    if scope != LINEARIZE_LAST:
        raise ContractError(f"unknown linearization scope {scope!r}, expected one of {LINEARIZE_SCOPES}")
    dense = spec.dense_layer_ids()
    if not dense:
        raise ContractError("last-layer linearization needs a Dense layer")
    for record in spec.layout():
        if record.layer_id == dense[-1]:
            return slice(record.offset, record.offset + record.size)
    raise ContractError(f"layer {dense[-1]} owns no parameters")


def embed_delta(dw, span: slice, size: int) -> np.ndarray:
    """Full-length delta that equals `dw` on `span` and zero elsewhere."""
    width = span.stop - span.start
    out = np.zeros(size)
    out[span] = as_delta(dw, width)
    return out


# ---------------------------------------------------------------------------
# TangentModel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TangentModel:
    """
    First-order expansion of a network around frozen weights w0.

    Immutable; forward, jacobian and linear_forward are pure functions of it,
    so a model can be shared between threads.
    """

    spec: NetworkSpec
    w0: ParamVector

    def __post_init__(self):
        if not self.w0.matches(self.spec):
            raise ContractError("w0 layout does not match the network spec")

    @property
    def num_params(self) -> int:
        return self.w0.size

    @property
    def num_classes(self) -> int:
        return self.spec.output_dim


def _resolve(model, w) -> Tuple[NetworkSpec, ParamVector]:
    if isinstance(model, TangentModel):
        return model.spec, (model.w0 if w is None else _coerce_params(model.spec, w))
    if isinstance(model, NetworkSpec):
        if w is None:
            raise ContractError("parameters are required when evaluating a bare NetworkSpec")
        return model, _coerce_params(model, w)
    raise ContractError(f"expected a TangentModel or NetworkSpec, got {type(model).__name__}")


def _coerce_params(spec: NetworkSpec, w) -> ParamVector:
    if isinstance(w, ParamVector):
        if not w.matches(spec):
            raise ContractError("parameter layout does not match the network spec")
        return w
    return ParamVector(as_delta(w, spec.num_params), spec.layout())


def _as_batch(spec: NetworkSpec, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
        raise ContractError(f"input has shape {x.shape}, expected trailing dimension {spec.input_dim}")
    if not np.all(np.isfinite(batch)):
        raise NumericError("input contains non-finite values")
    return batch, single


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------


def leaky_relu(z, slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    """
    Leaky-ReLU: z where z >= 0, slope * z elsewhere.

    Args:
        z: Real array
        slope: Negative-branch slope in (0, 1)

    Returns:
        Array of the same shape
    """
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky slope must lie in (0, 1), got {slope}")
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("leaky_relu input contains non-finite values")
    return np.where(z >= 0.0, z, slope * z)


def leaky_relu_derivative(z: np.ndarray, slope: float) -> np.ndarray:
    # The derivative at exactly 0 is the slope
    return np.where(z > 0.0, 1.0, slope)


def _dense_parts(layer: Dense, block: np.ndarray):
    weight = block[:, :layer.in_dim]
    bias = block[:, layer.in_dim] if layer.bias else None
    return weight, bias


def _homogeneous(layer: Dense, a: np.ndarray) -> np.ndarray:
    if layer.bias:
        return np.concatenate([a, np.ones(a.shape[:-1] + (1,))], axis=-1)
    return a


def _norm_parts(layer: FrozenNorm, params: ParamVector, layer_id: int):
    if layer.trainable:
        block = params.block(layer_id)
        scale, shift = block[0], block[1]
    else:
        scale, shift = np.asarray(layer.scale), np.asarray(layer.shift)
    inv_std = 1.0 / np.sqrt(np.asarray(layer.var))
    return scale, shift, inv_std


def _check_finite(values: np.ndarray, layer_id: int, what: str = "activation"):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite {what} after layer {layer_id}")


def _forward_cached(spec: NetworkSpec, params: ParamVector, batch: np.ndarray):
    """Run the network on a batch and keep every layer input for the backward pass."""
    inputs = []
    a = batch
    for idx, layer in enumerate(spec.layers):
        inputs.append(a)
        if isinstance(layer, Dense):
            weight, bias = _dense_parts(layer, params.block(idx))
            a = a @ weight.T
            if bias is not None:
                a = a + bias
        elif isinstance(layer, Activation):
            a = np.where(a >= 0.0, a, layer.leaky_slope * a)
        elif isinstance(layer, FrozenNorm):
            scale, shift, inv_std = _norm_parts(layer, params, idx)
            a = scale * (a - np.asarray(layer.mean)) * inv_std + shift
        elif isinstance(layer, MeanPool):
            a = a.reshape(a.shape[0], -1, layer.channels).mean(axis=1)
        elif isinstance(layer, BilinearPool):
            c = layer.channels
            a = np.stack([
                pooling.bilinear_pool_forward(row.reshape(-1, c)).ravel() for row in a
            ])
        _check_finite(a, idx)
    return a, inputs


def _backward(spec: NetworkSpec, params: ParamVector, inputs, cotangent: np.ndarray,
              per_sample: bool, on_layer=None) -> np.ndarray:
    """
    Pull output cotangents back to parameter gradients.

    Args:
        cotangent: (n, k, C) cotangents, k of them per sample
        per_sample: Return (n, k, D) per-sample gradients instead of their sum
        on_layer: Optional callback(layer_id, layer, layer_input, output_cotangent)
                  invoked for every layer on the way back

    Returns:
        (n, k, D) array, or the (D,) sum over samples and cotangents
    """
    n, k, _ = cotangent.shape
    offsets = {record.layer_id: record for record in params.layout}
    grads = np.zeros((n, k, params.size)) if per_sample else np.zeros(params.size)
    cot = cotangent

    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        a = inputs[idx]
        if on_layer is not None:
            on_layer(idx, layer, a, cot)
        if isinstance(layer, Dense):
            record = offsets[idx]
            a_bar = _homogeneous(layer, a)
            span = slice(record.offset, record.offset + record.size)
            if per_sample:
                grads[:, :, span] = np.einsum("nko,ni->nkoi", cot, a_bar).reshape(n, k, -1)
            else:
                grads[span] = np.einsum("nko,ni->oi", cot, a_bar).ravel()
            weight, _ = _dense_parts(layer, params.block(idx))
            cot = cot @ weight
        elif isinstance(layer, Activation):
            cot = cot * leaky_relu_derivative(a, layer.leaky_slope)[:, None, :]
        elif isinstance(layer, FrozenNorm):
            scale, _, inv_std = _norm_parts(layer, params, idx)
            if layer.trainable:
                record = offsets[idx]
                x_hat = (a - np.asarray(layer.mean)) * inv_std
                block = np.concatenate([cot * x_hat[:, None, :], cot], axis=-1)
                span = slice(record.offset, record.offset + record.size)
                if per_sample:
                    grads[:, :, span] = block
                else:
                    grads[span] = block.sum(axis=(0, 1))
            cot = cot * (scale * inv_std)
        elif isinstance(layer, MeanPool):
            positions = a.shape[1] // layer.channels
            cot = np.tile(cot, positions) / positions
        elif isinstance(layer, BilinearPool):
            c = layer.channels
            pulled = np.empty((n, k, a.shape[1]))
            for s in range(n):
                z = a[s].reshape(-1, c)
                for j in range(k):
                    pulled[s, j] = pooling.bilinear_pool_adjoint(
                        z, cot[s, j].reshape(c, c), layer.tangent_mode
                    ).ravel()
            cot = pulled
    return grads


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def forward(model, x, w=None) -> np.ndarray:
    """
    Evaluate the nonlinear network f_w(x).

    Args:
        model: TangentModel (evaluated at w0 unless `w` is given) or NetworkSpec
        x: Input vector (input_dim,) or batch (n, input_dim)
        w: Optional parameters overriding w0

    Returns:
        Outputs, shape (C,) for a single input or (n, C) for a batch
    """
    spec, params = _resolve(model, w)
    batch, single = _as_batch(spec, x)
    out, _ = _forward_cached(spec, params, batch)
    return out[0] if single else out


def batch_jacobian(model, x, w=None) -> np.ndarray:
    """
    Per-sample Jacobians of the outputs with respect to all parameters.

    Args:
        model: TangentModel or NetworkSpec (with `w`)
        x: Batch of inputs (n, input_dim)
        w: Optional parameters overriding w0

    Returns:
        Array of shape (n, C, D)
    """
    spec, params = _resolve(model, w)
    batch, _ = _as_batch(spec, x)
    _, inputs = _forward_cached(spec, params, batch)
    n, c = batch.shape[0], spec.output_dim
    basis = np.broadcast_to(np.eye(c), (n, c, c))
    return _backward(spec, params, inputs, basis, per_sample=True)


def jacobian(model, x) -> np.ndarray:
    """
    Jacobian g(x) of the outputs at the linearization point.

    Row c holds the gradient of output c with respect to all D parameters,
    accumulated analytically by a backward pass.

    Args:
        model: TangentModel
        x: Input vector (input_dim,)

    Returns:
        Dense (C, D) matrix
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("jacobian() takes a single input vector; use batch_jacobian() for batches")
    return batch_jacobian(model, x[None, :])[0]


def vjp(model, x, cotangent, w=None) -> np.ndarray:
    """
    Vector-Jacobian product summed over a batch.

    Args:
        model: TangentModel or NetworkSpec (with `w`)
        x: Batch of inputs (n, input_dim)
        cotangent: (n, C) cotangents on the outputs
        w: Optional parameters overriding w0

    Returns:
        (D,) gradient sum_i J(x_i)^T cotangent_i
    """
    spec, params = _resolve(model, w)
    batch, _ = _as_batch(spec, x)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (batch.shape[0], spec.output_dim):
        raise ContractError(f"cotangent has shape {cotangent.shape}, expected {(batch.shape[0], spec.output_dim)}")
    _, inputs = _forward_cached(spec, params, batch)
    return _backward(spec, params, inputs, cotangent[:, None, :], per_sample=False)


def walk_backward(model: TangentModel, x, on_layer) -> None:
    """
    Backpropagate every output basis direction and report each layer.

    on_layer(layer_id, layer, layer_input, output_cotangent) receives the
    (n, in) input of the layer and the (n, C, out) cotangents on its output,
    one per output class.

    Args:
        model: TangentModel
        x: Batch of inputs (n, input_dim)
        on_layer: Callback invoked from the last layer to the first
    """
    spec, params = _resolve(model, None)
    batch, _ = _as_batch(spec, x)
    _, inputs = _forward_cached(spec, params, batch)
    n, c = batch.shape[0], spec.output_dim
    basis = np.broadcast_to(np.eye(c), (n, c, c))
    _backward(spec, params, inputs, basis, per_sample=False, on_layer=on_layer)


def linear_forward(model: TangentModel, dw, x) -> np.ndarray:
    """
    Evaluate the tangent model f_w0(x) + g(x) . dw without forming g.

    A (value, tangent) pair is propagated through every layer, so the cost
    is a small constant number of forward passes.

    Args:
        model: TangentModel
        dw: Parameter delta (ParamVector or array of length D)
        x: Input vector or batch

    Returns:
        Outputs, shape (C,) or (n, C)
    """
    if not isinstance(model, TangentModel):
        raise ContractError("linear_forward() needs a TangentModel")
    spec, params = model.spec, model.w0
    delta = ParamVector(as_delta(dw, params.size), params.layout)

    batch, single = _as_batch(spec, x)
    a = batch
    da = np.zeros_like(batch)
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            weight, bias = _dense_parts(layer, params.block(idx))
            d_weight, d_bias = _dense_parts(layer, delta.block(idx))
            z = a @ weight.T
            dz = da @ weight.T + a @ d_weight.T
            if bias is not None:
                z = z + bias
                dz = dz + d_bias
            a, da = z, dz
        elif isinstance(layer, Activation):
            da = leaky_relu_derivative(a, layer.leaky_slope) * da
            a = np.where(a >= 0.0, a, layer.leaky_slope * a)
        elif isinstance(layer, FrozenNorm):
            scale, shift, inv_std = _norm_parts(layer, params, idx)
            x_hat = (a - np.asarray(layer.mean)) * inv_std
            new_da = scale * inv_std * da
            if layer.trainable:
                d_block = delta.block(idx)
                new_da = new_da + d_block[0] * x_hat + d_block[1]
            a, da = scale * x_hat + shift, new_da
        elif isinstance(layer, MeanPool):
            c = layer.channels
            a = a.reshape(a.shape[0], -1, c).mean(axis=1)
            da = da.reshape(da.shape[0], -1, c).mean(axis=1)
        elif isinstance(layer, BilinearPool):
            c = layer.channels
            values, tangents = [], []
            for row, drow in zip(a, da):
                z, dz = row.reshape(-1, c), drow.reshape(-1, c)
                sigma = pooling.covariance(z)
                values.append(pooling.psd_sqrt(sigma).ravel())
                factor = pooling.SqrtFactor.from_covariance(sigma)
                tangents.append(factor.tangent(pooling.covariance_tangent(z, dz), layer.tangent_mode).ravel())
            a, da = np.stack(values), np.stack(tangents)
        _check_finite(a, idx)
        _check_finite(da, idx, "tangent")

    out = a + da
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """
    Seeded Kaiming-normal initialization adjusted for the Leaky-ReLU slope.

    Biases start at zero; trainable FrozenNorm layers start from the
    scale/shift stored in the spec.

    Args:
        spec: Network architecture
        seed: RNG seed

    Returns:
        ParamVector matching spec.layout()
    """
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    values = np.zeros(spec.num_params)
    for record in layout:
        layer = spec.layers[record.layer_id]
        span = slice(record.offset, record.offset + record.size)
        if isinstance(layer, Dense):
            following = spec.layers[record.layer_id + 1:record.layer_id + 2]
            if following and isinstance(following[0], Activation):
                slope = following[0].leaky_slope
                std = np.sqrt(2.0 / ((1.0 + slope ** 2) * layer.in_dim))
            else:
                std = np.sqrt(1.0 / layer.in_dim)
            block = np.zeros(record.shape)
            block[:, :layer.in_dim] = rng.normal(0.0, std, size=(layer.out_dim, layer.in_dim))
            values[span] = block.ravel()
        else:
            values[span] = np.concatenate([layer.scale, layer.shift])
    return ParamVector(values, layout)


def build_mlp_spec(input_dim: int, hidden: Sequence[int], output_dim: int,
                   slope: float = DEFAULT_LEAKY_SLOPE, bias: bool = True,
                   pool: Optional[str] = None, pool_channels: Optional[int] = None,
                   pool_tangent_mode: str = pooling.SYLVESTER) -> NetworkSpec:
    """
    Build a Dense/Leaky-ReLU stack, optionally ending in a pooling head.

    Args:
        input_dim: Input vector length
        hidden: Widths of the hidden Dense layers
        output_dim: Number of classes
        slope: Leaky-ReLU slope
        bias: Whether Dense layers carry biases
        pool: None, "mean" or "bilinear"; the head reads the last hidden
              layer as a (positions, pool_channels) feature map
        pool_channels: Channel count of the pooling head
        pool_tangent_mode: Tangent mode for a bilinear head

    Returns:
        A validated NetworkSpec
    """
    layers: List[Layer] = []
    width = input_dim
    for size in hidden:
        layers.append(Dense(width, int(size), bias))
        layers.append(Activation(slope))
        width = int(size)
    if pool:
        if not hidden or not pool_channels:
            raise ContractError("a pooling head needs at least one hidden layer and pool_channels")
        if pool == "bilinear":
            layers.append(BilinearPool(int(pool_channels), pool_tangent_mode))
            width = int(pool_channels) ** 2
        elif pool == "mean":
            layers.append(MeanPool(int(pool_channels)))
            width = int(pool_channels)
        else:
            raise ContractError(f"unknown pooling head {pool!r}, expected 'mean' or 'bilinear'")
    layers.append(Dense(width, output_dim, bias))
    return NetworkSpec(tuple(layers), input_dim, output_dim)
