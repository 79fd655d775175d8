"""
Tests for the Kronecker-factored curvature approximation.
"""

import numpy as np
import pytest

from conftest import make_data, make_model, make_problem, relative
from engine import kfac
from engine.errors import ContractError
from engine.network import (
    LINEARIZE_LAST, Activation, Dense, FrozenNorm, NetworkSpec, TangentModel, init_params, parameter_span,
)
from engine.quadratic import assemble


def test_single_dense_layer_is_exact():
    """Test that K-FAC reproduces the exact Fisher of a single Dense layer."""
    for classes in (1, 3):
        model, data, problem = make_problem(seed=2, hidden=(), classes=classes)
        state = kfac.estimate(model, data)
        error = kfac.approximation_error(state, problem)
        assert error < 1e-8, f"C={classes}: approximation error {error:.2e} should vanish"


def test_factor_shapes_follow_layout():
    model = make_model(0, hidden=(5,))
    state = kfac.estimate(model, make_data())
    shapes = [f.shape for f in state.factors]
    assert shapes == [(5, 5), (3, 6)], "blocks are (out, in + 1)"
    for factor in state.factors:
        assert factor.A.shape == (factor.shape[1],) * 2, "A is (in + 1) square"
        assert factor.G.shape == (factor.shape[0],) * 2, "G is out square"


def test_default_damping_scale():
    """Test gamma = 1e-3 * trace(F_kfac) / D."""
    model = make_model(1)
    state = kfac.estimate(model, make_data())
    expected = 1e-3 * np.trace(state.dense_matrix()) / state.dim
    assert np.isclose(state.damping, expected), "default damping is relative to the mean eigenvalue"


def test_apply_inverse_matches_dense_inverse():
    """Test eigen-style damping against (F_kfac + gamma I)^-1."""
    model = make_model(3, hidden=(4,))
    state = kfac.estimate(model, make_data(), damping_style=kfac.EIGEN)
    v = np.random.default_rng(3).standard_normal(state.dim)
    dense = np.linalg.inv(state.dense_matrix() + state.damping * np.eye(state.dim))
    assert relative(kfac.apply_inverse(state, v), dense @ v) < 1e-8, "eigen damping is exact Tikhonov damping"


def test_factored_damping_matches_its_definition():
    """Test factored damping against its dense (G + pi sqrt(g) I) (x) (A + sqrt(g)/pi I)."""
    model = make_model(4, hidden=(4,))
    state = kfac.estimate(model, make_data())
    v = np.random.default_rng(4).standard_normal(state.dim)
    expected = np.linalg.solve(state.damped_dense_matrix(), v)
    assert relative(kfac.apply_inverse(state, v), expected) < 1e-8, "factored inverse"


def test_apply_inverse_is_spd_and_linear():
    model = make_model(5, hidden=(4,))
    state = kfac.estimate(model, make_data())
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal((2, state.dim))
    assert u @ kfac.apply_inverse(state, u) > 0, "inverse should be positive definite"
    assert np.isclose(u @ kfac.apply_inverse(state, v), v @ kfac.apply_inverse(state, u)), "symmetric"
    combined = kfac.apply_inverse(state, 2.0 * u - 3.0 * v)
    expected = 2.0 * kfac.apply_inverse(state, u) - 3.0 * kfac.apply_inverse(state, v)
    assert relative(combined, expected) < 1e-12, "linear in v"


def test_state_lifecycle():
    """Test that estimation happens once and inverse needs an estimate."""
    state = kfac.KfacState()
    with pytest.raises(ContractError):
        state.apply_inverse(np.zeros(3))
    model = make_model(6)
    state.estimate(model, make_data())
    assert state.frozen, "estimate() freezes the state"
    with pytest.raises(ContractError):
        state.estimate(model, make_data())


def test_bad_arguments():
    with pytest.raises(ContractError):
        kfac.KfacState(damping_style="diagonal")
    with pytest.raises(ContractError):
        kfac.KfacState(damping=-1.0)
    state = kfac.estimate(make_model(7), make_data())
    with pytest.raises(ContractError):
        state.apply_inverse(np.zeros(state.dim + 1))


def test_trainable_norm_gets_scalar_group():
    """Test that FrozenNorm parameters are preconditioned by one scalar."""
    norm = FrozenNorm((0.0,) * 3, (1.0,) * 3, (1.0,) * 3, (0.0,) * 3, trainable=True)
    spec = NetworkSpec((Dense(4, 3), norm, Activation(0.1), Dense(3, 3)), 4, 3)
    model = TangentModel(spec, init_params(spec, 8))
    data = make_data(9)
    state = kfac.estimate(model, data)
    assert len(state.groups) == 1 and state.groups[0].size == 6, "one group over scale and shift"
    problem = assemble(model, data)
    exact = np.diag(problem.J.T @ problem.J / problem.num_samples)[state.groups[0].span]
    assert np.isclose(state.groups[0].value, exact.mean()), "group value is the mean diagonal Fisher"
    v = np.random.default_rng(9).standard_normal(state.dim)
    out = state.apply_inverse(v)
    assert np.allclose(out[state.groups[0].span], v[state.groups[0].span] / (state.groups[0].value + state.damping))


def test_multilayer_approximation_is_reasonable():
    """Test that a multi-layer network is approximated, not reproduced."""
    model, data, problem = make_problem(seed=10, hidden=(5,))
    error = kfac.approximation_error(kfac.estimate(model, data), problem)
    assert np.isfinite(error) and error > 1e-8, f"approximation error {error:.3e} should be non-zero"


def test_restricted_state_is_the_last_block():
    """Test that restricting to the final Dense block keeps that block of the full approximation."""
    model = make_model(6, hidden=(4,))
    data = make_data(7)
    span = parameter_span(model.spec, LINEARIZE_LAST)
    state = kfac.estimate(model, data, damping=1e-2, damping_style=kfac.EIGEN)
    restricted = state.restricted(span)
    assert restricted.dim == span.stop - span.start
    assert restricted.damping == state.damping, "resolved damping carries over"
    assert np.allclose(restricted.dense_matrix(), state.dense_matrix()[span, span]), "block-diagonal slice"
    v = np.random.default_rng(6).standard_normal(restricted.dim)
    full = np.zeros(state.dim)
    full[span] = v
    assert relative(restricted.apply_inverse(v), state.apply_inverse(full)[span]) < 1e-10, \
        "the inverse of a block-diagonal matrix acts block by block"
    with pytest.raises(ContractError):
        state.restricted(slice(span.start + 1, span.stop))
