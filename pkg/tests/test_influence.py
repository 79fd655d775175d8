"""
Tests for leave-one-out influence, F-SI and dataset summarization.
"""

import numpy as np
import pytest

from conftest import make_data, make_problem, relative
from engine import kfac
from engine.errors import ContractError
from engine.influence import (
    BRUTE_FORCE, DROP_BOTTOM, DROP_TOP, EXACT, KFAC_APPROX, ExactInverse, InfluenceReport, KfacInverse,
    activation_delta, brute_force_loo, create_inverse_provider, fsi, influence_report, loo_step,
    loo_weights, rank_correlation, residuals, sherman_morrison_delta, summarize,
)
from engine.network import batch_jacobian
from engine.quadratic import LinearizedProblem, assemble, closed_form


def test_exact_loo_matches_brute_force():
    """Test the Woodbury Newton step against re-solving without each sample."""
    for classes in (1, 3):
        model, _, problem = make_problem(seed=classes, classes=classes, per_class=12 if classes == 1 else 6)
        wstar = closed_form(problem)
        provider = ExactInverse(problem)
        g_test = batch_jacobian(model, make_data(20, per_class=1).inputs)
        for i in range(problem.num_samples):
            reference = brute_force_loo(problem, i)
            assert relative(loo_weights(problem, wstar, i, provider), reference) < 1e-6, f"C={classes}, i={i}"
            expected = g_test @ (wstar - reference)
            assert relative(activation_delta(problem, wstar, i, g_test, provider), expected) < 1e-6


def test_loo_without_decay():
    """Test the lambda = 0 case, where only the data term moves."""
    model, _, problem = make_problem(seed=5, per_class=10, lam=0.0)
    wstar = closed_form(problem)
    provider = ExactInverse(problem)
    for i in (0, 7, problem.num_samples - 1):
        assert relative(loo_weights(problem, wstar, i, provider), brute_force_loo(problem, i)) < 1e-6


def test_sherman_morrison_matches_woodbury():
    """Test the scalar C = 1 path against the multiclass path."""
    model, _, problem = make_problem(seed=6, classes=1, per_class=15)
    wstar = closed_form(problem)
    provider = ExactInverse(problem)
    g_test = batch_jacobian(model, np.random.default_rng(6).standard_normal((1, 4)))[0]
    for i in range(problem.num_samples):
        scalar = sherman_morrison_delta(problem, wstar, i, g_test, provider)
        woodbury = activation_delta(problem, wstar, i, g_test, provider)[0]
        assert abs(scalar - woodbury) <= 1e-8 * max(abs(woodbury), 1e-12), f"sample {i} disagrees"
    with pytest.raises(ContractError):
        sherman_morrison_delta(make_problem()[2], wstar, 0, g_test, provider)


def test_tiny_hand_example():
    """Test two samples of a one-parameter problem: J = [1, 1], r = [1, 3]."""
    problem = LinearizedProblem(J=[[1.0], [1.0]], r=[1.0, 3.0], num_samples=2, num_classes=1, lam=0.0)
    wstar = closed_form(problem)
    assert np.isclose(wstar[0], 2.0), "optimum is the mean target"
    provider = ExactInverse(problem)
    assert np.isclose(loo_weights(problem, wstar, 0, provider)[0], 3.0), "without sample 0 only r = 3 remains"
    assert np.isclose(loo_weights(problem, wstar, 1, provider)[0], 1.0)


def test_residuals_shape(small_problem):
    _, _, problem = small_problem
    wstar = closed_form(problem)
    e = residuals(problem, wstar)
    assert e.shape == (problem.num_samples, problem.num_classes)
    assert np.allclose(e[2], (problem.sample_targets(2) - problem.sample_jacobian(2) @ wstar) / problem.num_samples)


def test_unconverged_weights_rejected(small_problem):
    model, data, problem = small_problem
    g_val = batch_jacobian(model, data.inputs[:3])
    with pytest.raises(ContractError):
        influence_report(problem, np.zeros(problem.dim), g_val, provider=ExactInverse(problem))


def test_loo_needs_two_samples():
    problem = LinearizedProblem(J=[[1.0]], r=[1.0], num_samples=1, num_classes=1, lam=1.0)
    with pytest.raises(ContractError):
        ExactInverse(problem)


def test_fsi_is_mean_squared_delta(small_problem):
    model, data, problem = small_problem
    wstar = closed_form(problem)
    provider = ExactInverse(problem)
    g_val = batch_jacobian(model, make_data(30, per_class=2).inputs)
    step = loo_step(problem, wstar, 4, provider)
    expected = np.mean(np.sum((g_val @ step) ** 2, axis=1))
    assert np.isclose(fsi(problem, wstar, 4, g_val, provider), expected), "F-SI is the mean squared delta"


def test_report_methods_agree():
    """Test exact and brute-force reports, and K-FAC rank agreement."""
    model, data, problem = make_problem(seed=7, per_class=6)
    wstar = closed_form(problem)
    g_val = batch_jacobian(model, make_data(31, per_class=2).inputs)
    exact = influence_report(problem, wstar, g_val, provider=ExactInverse(problem))
    brute = influence_report(problem, wstar, g_val)
    assert exact.method == EXACT and brute.method == BRUTE_FORCE
    assert relative(exact.fsi, brute.fsi) < 1e-6, "exact F-SI should equal brute force"
    assert relative(exact.weight_delta_norm, brute.weight_delta_norm) < 1e-6

    state = kfac.estimate(model, data)
    approx = influence_report(problem, wstar, g_val, provider=create_inverse_provider("kfac", problem, state))
    assert approx.method == KFAC_APPROX
    assert -1.0 <= rank_correlation(exact, approx) <= 1.0
    assert np.isclose(rank_correlation(exact, brute), 1.0), "identical rankings correlate perfectly"


def test_kfac_inverse_scaling():
    """Test that the K-FAC provider applies ((N-1)/N) (F_kfac + damping)^-1."""
    model, data, problem = make_problem(seed=8, hidden=(), per_class=5)
    state = kfac.estimate(model, data, damping=problem.lam, damping_style=kfac.EIGEN)
    provider = KfacInverse(problem, state)
    v = np.random.default_rng(8).standard_normal(problem.dim)
    n = problem.num_samples
    expected = ((n - 1) / n) * state.apply_inverse(v)
    assert np.allclose(provider.solve(v), expected)
    assert np.allclose(provider.solve(np.stack([v, 2 * v], axis=1))[:, 1], 2 * expected), "matrix right-hand sides"


def test_ranking_ties_prefer_lower_index():
    report = InfluenceReport(method=EXACT, weight_delta_norm=np.zeros(4), activation_deltas=np.zeros((4, 0, 1)),
                             fsi=np.array([1.0, 3.0, 1.0, 3.0]), residuals=np.zeros((4, 1)))
    assert list(report.ranking()) == [1, 3, 0, 2], "descending, stable on ties"
    with pytest.raises(ContractError):
        InfluenceReport(method="guess", weight_delta_norm=np.zeros(1), activation_deltas=np.zeros((1, 0, 1)),
                        fsi=np.zeros(1), residuals=np.zeros((1, 1)))


def test_summarize_modes():
    """Test the removed sets of both modes and the k = 0 baseline."""
    model, data, problem = make_problem(seed=9, per_class=8)
    wstar = closed_form(problem)
    test_problem = assemble(model, make_data(40, per_class=6))
    g_val = batch_jacobian(model, make_data(41, per_class=3).inputs)
    report = influence_report(problem, wstar, g_val, provider=ExactInverse(problem))
    order = report.ranking()

    top = summarize(problem, report, 3, DROP_TOP, test_problem)
    assert set(top.removed) == set(order[:3]), "drop-top removes the highest scores"
    bottom = summarize(problem, report, 3, DROP_BOTTOM, test_problem)
    assert set(bottom.removed) == set(np.argsort(report.fsi, kind="stable")[:3]), "drop-bottom removes the lowest"
    assert len(top.kept) == problem.num_samples - 3

    baseline = summarize(problem, report, 0, DROP_TOP, test_problem)
    assert np.allclose(baseline.wstar, wstar), "k = 0 keeps the full problem"
    with pytest.raises(ContractError):
        summarize(problem, report, problem.num_samples, DROP_TOP, test_problem)
    with pytest.raises(ContractError):
        summarize(problem, report, 1, "drop-middle", test_problem)
