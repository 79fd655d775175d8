"""
Tests for network evaluation, exact Jacobians and the tangent model.
"""

import numpy as np
import pytest

from conftest import make_model, relative
from engine.errors import ContractError, NumericError
from engine.network import (
    LINEARIZE_ALL, LINEARIZE_LAST, Activation, Dense, FrozenNorm, NetworkSpec, ParamVector, TangentModel,
    batch_jacobian, build_mlp_spec, embed_delta, forward, init_params, jacobian, leaky_relu, linear_forward,
    parameter_span, vjp,
)


def _single_dense(weight, bias=None):
    spec = NetworkSpec((Dense(1, 1, bias is not None),), 1, 1)
    values = [weight] if bias is None else [weight, bias]
    return TangentModel(spec, ParamVector(values, spec.layout()))


def test_forward_small_examples():
    """Test forward on hand-computed one-unit networks."""
    # Linear map
    model = _single_dense(2.0, 0.0)
    assert forward(model, [3.0])[0] == 6.0, "Dense(weight 2) should map 3 to 6"

    # Negative branch of the activation
    spec = NetworkSpec((Dense(1, 1, True), Activation(0.1)), 1, 1)
    model = TangentModel(spec, ParamVector([1.0, 0.0], spec.layout()))
    assert np.isclose(forward(model, [-2.0])[0], -0.2), "leaky(0.1) of -2 should be -0.2"


def test_forward_is_deterministic():
    """Test that two evaluations are bit-identical."""
    model = make_model(3, hidden=(6, 5))
    x = np.random.default_rng(0).standard_normal(4)
    assert np.array_equal(forward(model, x), forward(model, x)), "forward should be deterministic"


def test_leaky_relu_values():
    """Test the Leaky-ReLU branches and the zero boundary."""
    assert leaky_relu(5.0, 0.01) == 5.0, "positive inputs pass through"
    assert np.isclose(leaky_relu(-2.0, 0.1), -0.2), "negative inputs are scaled by the slope"
    assert leaky_relu(0.0, 0.3) == 0.0, "zero maps to zero"
    with pytest.raises(ContractError):
        leaky_relu(1.0, 1.5)


def test_spec_validation():
    """Test that inconsistent architectures are rejected."""
    with pytest.raises(ContractError):
        NetworkSpec((Dense(3, 4), Dense(5, 2)), 3, 2)
    with pytest.raises(ContractError):
        NetworkSpec((Dense(3, 4), Activation(1.2), Dense(4, 2)), 3, 2)
    with pytest.raises(ContractError):
        NetworkSpec((FrozenNorm((0.0,), (0.0,), (1.0,), (0.0,)), Dense(1, 1)), 1, 1)


def test_dimension_mismatch():
    """Test contract errors on wrong input or delta sizes."""
    model = make_model(0)
    with pytest.raises(ContractError):
        forward(model, np.zeros(7))
    with pytest.raises(ContractError):
        linear_forward(model, np.zeros(model.num_params + 1), np.zeros(4))


def test_non_finite_input():
    model = make_model(0)
    with pytest.raises(NumericError):
        forward(model, np.array([np.nan, 0.0, 0.0, 0.0]))


def test_jacobian_single_weight():
    """Test d(wx)/dw = x for a bias-free unit."""
    model = _single_dense(0.7)
    assert np.allclose(jacobian(model, [3.0]), [[3.0]]), "Jacobian should equal the input"


def test_jacobian_leaky_branch_scaling():
    """Test that a negative pre-activation scales the Jacobian by the slope."""
    spec = NetworkSpec((Dense(1, 1, False), Activation(0.1)), 1, 1)
    model = TangentModel(spec, ParamVector([1.0], spec.layout()))
    positive = jacobian(model, [2.0])
    negative = jacobian(model, [-2.0])
    assert np.isclose(negative[0, 0], 0.1 * -positive[0, 0]), "negative branch should carry the slope"


def test_jacobian_matches_finite_differences():
    """Test analytic Jacobians column by column against central differences."""
    model = make_model(2, hidden=(5, 4))
    x = np.random.default_rng(5).standard_normal(4)
    jac = jacobian(model, x)
    w0 = model.w0.values
    h = 1e-5
    for k in range(model.num_params):
        step = np.zeros_like(w0)
        step[k] = h
        column = (forward(model, x, w0 + step) - forward(model, x, w0 - step)) / (2 * h)
        assert np.max(np.abs(jac[:, k] - column)) < 1e-6, f"column {k} disagrees with finite differences"


def test_linear_forward_matches_explicit_jacobian():
    """Test f0 + J dw against the paired value/tangent pass."""
    model = make_model(4, hidden=(6,))
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 4))
    dw = 0.1 * rng.standard_normal(model.num_params)
    expected = forward(model, x) + batch_jacobian(model, x) @ dw
    assert relative(linear_forward(model, dw, x), expected) < 1e-10, "tangent consistency violated"

    # dw = 0 is the base network
    assert np.array_equal(linear_forward(model, np.zeros(model.num_params), x), forward(model, x))


def test_linear_forward_is_affine_in_delta():
    """Test linearity in dw up to the f0 offset."""
    model = make_model(7)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4))
    d1, d2 = rng.standard_normal((2, model.num_params))
    a, b = 0.3, -1.7
    f0 = forward(model, x)
    combined = linear_forward(model, a * d1 + b * d2, x)
    expected = a * linear_forward(model, d1, x) + b * linear_forward(model, d2, x) + (1 - a - b) * f0
    assert relative(combined, expected) < 1e-10, "linear_forward should be affine in dw"


def test_first_order_accuracy():
    """Test that halving the step cuts the linearization error about four times."""
    model = make_model(8, hidden=(6,))
    rng = np.random.default_rng(8)
    w0 = model.w0.values
    passing = 0
    trials = 20
    for _ in range(trials):
        x = rng.standard_normal(4)
        v = rng.standard_normal(model.num_params)
        v /= np.linalg.norm(v)
        errors = [np.linalg.norm(forward(model, x, w0 + e * v) - linear_forward(model, e * v, x))
                  for e in (1e-3, 5e-4)]
        if errors[1] < 1e-13 or errors[0] / errors[1] >= 3.9:
            passing += 1
    assert passing >= 0.95 * trials, f"only {passing}/{trials} pairs showed second-order error"


def test_vjp_matches_jacobian_transpose():
    """Test the summed vector-Jacobian product against J^T c."""
    model = make_model(9)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 4))
    cot = rng.standard_normal((4, 3))
    expected = np.einsum("nc,ncd->d", cot, batch_jacobian(model, x))
    assert relative(vjp(model, x, cot), expected) < 1e-12, "vjp should equal sum_i J_i^T c_i"


def test_init_params_layout_and_seed():
    """Test seeded initialization: zero biases, reproducible values."""
    spec = build_mlp_spec(4, [5], 3)
    w = init_params(spec, 11)
    assert w.matches(spec), "initialization should follow the spec layout"
    assert np.array_equal(w.values, init_params(spec, 11).values), "same seed, same weights"
    assert np.all(w.block(0)[:, -1] == 0.0), "biases start at zero"


def test_frozen_norm_uses_stored_statistics():
    """Test that FrozenNorm applies stored mean/var whatever the batch."""
    norm = FrozenNorm((1.0,), (4.0,), (2.0,), (0.5,))
    spec = NetworkSpec((norm, Dense(1, 1, False)), 1, 1)
    model = TangentModel(spec, ParamVector([1.0], spec.layout()))
    out = forward(model, np.array([[3.0], [5.0]]))
    assert np.allclose(out[:, 0], [2.0 * (3 - 1) / 2 + 0.5, 2.0 * (5 - 1) / 2 + 0.5]), "stored statistics only"


def test_trainable_norm_jacobian():
    """Test finite differences through a trainable FrozenNorm layer."""
    norm = FrozenNorm((0.0, 1.0), (1.0, 2.0), (1.0, 1.0), (0.0, 0.0), trainable=True)
    spec = NetworkSpec((Dense(3, 2), norm, Activation(0.1), Dense(2, 2)), 3, 2)
    model = TangentModel(spec, init_params(spec, 3))
    x = np.array([0.4, -0.2, 0.9])
    jac = jacobian(model, x)
    w0 = model.w0.values
    h = 1e-6
    for k in range(model.num_params):
        step = np.zeros_like(w0)
        step[k] = h
        column = (forward(model, x, w0 + step) - forward(model, x, w0 - step)) / (2 * h)
        assert np.allclose(jac[:, k], column, atol=1e-6), f"column {k} disagrees"


def test_spec_document_roundtrip():
    """Test that the textual network document rebuilds the same spec."""
    spec = build_mlp_spec(4, [5, 3], 2, slope=0.2, bias=False)
    assert NetworkSpec.from_document(spec.to_document()) == spec, "document should preserve the spec"


def test_parameter_span_scopes():
    """Test that the last-layer scope covers exactly the final Dense block."""
    spec = build_mlp_spec(4, [5], 3)
    assert parameter_span(spec, LINEARIZE_ALL) == slice(0, spec.num_params)
    assert parameter_span(spec, LINEARIZE_LAST) == slice(25, 43), "W2 and b2 follow the 4 * 5 + 5 first-layer entries"
    assert parameter_span(build_mlp_spec(4, [], 3), LINEARIZE_LAST) == slice(0, 15), "one layer is all layers"
    with pytest.raises(ContractError):
        parameter_span(spec, "middle")
    with pytest.raises(ContractError):
        parameter_span(NetworkSpec((Activation(0.1),), 2, 2), LINEARIZE_LAST)


def test_embed_delta_zero_pads():
    full = embed_delta([1.0, 2.0], slice(3, 5), 6)
    assert np.array_equal(full, [0.0, 0.0, 0.0, 1.0, 2.0, 0.0])
    with pytest.raises(ContractError):
        embed_delta([1.0], slice(3, 5), 6)
