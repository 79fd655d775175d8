"""
Tests for preconditioned SGD on the linearized problem and the nonlinear
reference trainer.
"""

import numpy as np
import pytest
import scipy.special

from conftest import make_data, make_model, make_problem, relative
from engine import kfac
from engine.errors import ContractError, DivergenceError
from engine.network import LINEARIZE_LAST, parameter_span
from engine.preconditioners import AdamPreconditioner, create_preconditioner
from engine.quadratic import LinearizedProblem, assemble, closed_form, exact_hessian, loss
from engine.trainer import (
    ConsecutiveErrorStop, OptimizerConfig, effective_learning_rate, equal_elr_configs, evaluate,
    evaluate_nonlinear, max_stable_lr, predicted_distance, train, train_linearized_ce, train_nonlinear,
)


def test_kfac_training_reaches_closed_form_single_layer():
    """Test K-FAC preconditioned full-batch training against the closed form (exact K-FAC)."""
    for seed in range(3):
        model, data, problem = make_problem(seed=seed, hidden=(), lam=1e-3)
        state = kfac.estimate(model, data, damping=problem.lam, damping_style=kfac.EIGEN)
        config = OptimizerConfig(eta=0.1, preconditioner="kfac", max_epochs=400, stop_tolerance=1e-12)
        trajectory = train(problem, config, kfac=state)
        optimum = loss(problem, closed_form(problem))
        gap = abs(trajectory.final_loss - optimum) / optimum
        assert gap < 1e-6, f"seed {seed}: relative loss gap {gap:.2e}"


def test_kfac_training_reaches_closed_form_two_layers():
    """Test K-FAC training at eta = 0.1 on 20 two-layer problems, where K-FAC is only approximate."""
    config = OptimizerConfig(eta=0.1, momentum=0.9, preconditioner="kfac", max_epochs=6000,
                             stop_tolerance=1e-10, log_every=50)
    for seed in range(20):
        model, data, problem = make_problem(seed=seed, hidden=(5,), lam=1e-2)
        state = kfac.estimate(model, data, damping=problem.lam, damping_style=kfac.EIGEN)
        trajectory = train(problem, config.replace(seed=seed), kfac=state)
        optimum = loss(problem, closed_form(problem))
        gap = abs(trajectory.final_loss - optimum) / optimum
        assert gap < 1e-6, f"seed {seed}: relative loss gap {gap:.2e} after {trajectory.steps} steps"


def test_full_batch_descent_is_monotone():
    """Test that full-batch momentum-free runs below 2 / lambda_max(A H) never raise the loss."""
    for seed in range(3):
        model, data, problem = make_problem(seed=seed, hidden=(4,))
        H = exact_hessian(problem)
        state = kfac.estimate(model, data, damping=problem.lam, damping_style=kfac.EIGEN)
        for kind in ("none", "kfac"):
            state_arg = state if kind == "kfac" else None
            A = create_preconditioner(kind, problem=problem, kfac=state_arg).dense_matrix(problem.dim)
            config = OptimizerConfig(eta=0.9 * max_stable_lr(H, A), preconditioner=kind, max_epochs=200,
                                     stop_tolerance=0.0)
            losses = train(problem, config, kfac=state_arg).losses
            rises = np.diff(losses)
            assert np.all(rises <= 1e-12 * losses[:-1]), f"seed {seed}, {kind}: loss rose by {rises.max():.2e}"


def test_equal_elr_full_batch_runs_coincide(small_problem):
    """Test that two full-batch momentum-free configurations with the same ELR train identically."""
    _, _, problem = small_problem
    n = problem.num_samples
    first = OptimizerConfig(eta=0.05, batch_size=None, max_epochs=20, stop_tolerance=0.0, seed=1)
    second = first.replace(batch_size=n, seed=9)
    assert effective_learning_rate(first.eta, first.momentum, n) == \
        effective_learning_rate(second.eta, second.momentum, second.batch_size)
    a, b = train(problem, first), train(problem, second)
    assert np.array_equal(a.final_dw, b.final_dw), "full batch ignores the shuffle seed"
    assert evaluate(problem, a.final_dw) == evaluate(problem, b.final_dw)


def test_equal_elr_configs_share_the_rate():
    configs = equal_elr_configs(OptimizerConfig(max_epochs=7), 0.003125, [0.0, 0.9], [4, 32])
    assert [(c.momentum, c.batch_size) for c in configs] == [(0.0, 4), (0.0, 32), (0.9, 4), (0.9, 32)]
    for config in configs:
        elr = effective_learning_rate(config.eta, config.momentum, config.batch_size)
        assert np.isclose(elr, 0.003125), f"m={config.momentum}, b={config.batch_size}: ELR {elr}"
        assert config.max_epochs == 7, "other fields come from the template"
    assert np.isclose(configs[-1].eta, 0.01), "0.003125 * 0.1 * 32"
    with pytest.raises(ContractError):
        equal_elr_configs(OptimizerConfig(), 0.0, [0.0], [1])


def test_decaying_minibatch_sgd_reaches_closed_form(rng):
    """Test global convergence of seeded minibatch runs from random starts under the decaying schedule."""
    for seed in range(3):
        _, _, problem = make_problem(seed=seed, hidden=(), lam=1e-2)
        optimum = loss(problem, closed_form(problem))
        config = OptimizerConfig(eta=0.5, preconditioner="exact-inverse", batch_size=problem.num_samples // 2,
                                 schedule="decay", decay_steps=10.0, max_epochs=5000, stop_tolerance=0.0,
                                 seed=seed, log_every=500)
        trajectory = train(problem, config, w_start=rng.normal(size=problem.dim))
        gap = (trajectory.final_loss - optimum) / optimum
        assert -1e-12 < gap < 1e-6, f"seed {seed}: relative loss gap {gap:.2e}"


def test_newton_step_converges_in_one_step(small_problem):
    _, _, problem = small_problem
    config = OptimizerConfig(eta=1.0, preconditioner="exact-inverse", max_epochs=1, stop_tolerance=0.0)
    dw = train(problem, config).final_dw
    assert relative(dw, closed_form(problem)) < 1e-8, "A = H^-1, eta = 1 is Newton's method"


def test_dynamics_match_prediction():
    """Test w_t - w* = (I - eta A H)^t (w_0 - w*) for I, H^-1 and K-FAC."""
    model, data, problem = make_problem(seed=4, hidden=(4,))
    H = exact_hessian(problem)
    wstar = closed_form(problem)
    state = kfac.estimate(model, data)
    for kind in ("none", "exact-inverse", "kfac"):
        state_arg = state if kind == "kfac" else None
        A = create_preconditioner(kind, problem=problem, kfac=state_arg).dense_matrix(problem.dim)
        eta = 0.1 if kind == "exact-inverse" else 0.5 * max_stable_lr(H, A)
        for t in (1, 5, 20):
            config = OptimizerConfig(eta=eta, preconditioner=kind, max_epochs=t, stop_tolerance=0.0)
            dw = train(problem, config, kfac=state_arg).final_dw
            error = relative(dw - wstar, predicted_distance(H, A, eta, t, -wstar))
            assert error < 1e-8, f"{kind}, t={t}: prediction off by {error:.2e}"


def test_stability_bound_brackets_divergence():
    """Test divergence just above 2 / lambda_max and stability just below."""
    for seed in range(3):
        _, _, problem = make_problem(seed=seed, hidden=(3,), per_class=5)
        bound = max_stable_lr(exact_hessian(problem), np.eye(problem.dim))
        config = OptimizerConfig(eta=1.01 * bound, max_epochs=5000, stop_tolerance=0.0, log_every=5000)
        with pytest.raises(DivergenceError):
            train(problem, config)
        train(problem, config.replace(eta=0.99 * bound))


def test_max_stable_lr_diagonal():
    H = np.diag([4.0, 1.0])
    assert np.isclose(max_stable_lr(H, np.eye(2)), 0.5), "2 / lambda_max"
    assert np.isclose(max_stable_lr(H, np.diag([0.25, 1.0])), 2.0), "preconditioned spectrum is flat"


def test_predicted_distance_zero_steps():
    d = np.array([1.0, -2.0])
    assert np.array_equal(predicted_distance(np.eye(2), np.eye(2), 0.3, 0, d), d), "t = 0 is the start"
    with pytest.raises(ContractError):
        predicted_distance(np.eye(2), np.eye(2), 0.3, -1, d)


def test_effective_learning_rate():
    assert np.isclose(effective_learning_rate(0.1, 0.9, 10), 0.1), "0.1 / (0.1 * 10)"
    assert np.isclose(effective_learning_rate(0.01, 0.9, 32), 0.003125), "0.01 / (0.1 * 32)"
    assert effective_learning_rate(0.1, 0.0, 1) == 0.1, "no momentum, single sample"
    assert np.isclose(effective_learning_rate(0.05, 0.5, 16), 0.00625), "0.05 / (0.5 * 16)"
    with pytest.raises(ContractError):
        effective_learning_rate(0.1, 1.0, 10)


def test_zero_learning_rate_keeps_start(small_problem):
    _, _, problem = small_problem
    trajectory = train(problem, OptimizerConfig(eta=0.0, max_epochs=3))
    assert np.all(trajectory.final_dw == 0.0), "eta = 0 never moves"
    assert np.allclose(trajectory.losses, trajectory.losses[0]), "loss stays constant"


def test_training_is_deterministic(small_problem):
    """Test that a seeded minibatch run repeats exactly."""
    _, _, problem = small_problem
    config = OptimizerConfig(eta=0.05, momentum=0.5, batch_size=5, max_epochs=5, seed=3)
    first, second = train(problem, config), train(problem, config)
    assert np.array_equal(first.final_dw, second.final_dw), "same seed, same weights"
    assert [r.loss for r in first.records] == [r.loss for r in second.records], "same losses"


def test_divergence_is_reported():
    problem = LinearizedProblem(J=[[1.0]], r=[1.0], num_samples=1, num_classes=1, lam=0.0)
    with pytest.raises(DivergenceError) as info:
        train(problem, OptimizerConfig(eta=3.0, max_epochs=200))
    assert info.value.step > 0, "the step is reported"


def test_config_validation(small_problem):
    _, _, problem = small_problem
    with pytest.raises(ContractError):
        OptimizerConfig(eta=-0.1)
    with pytest.raises(ContractError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ContractError):
        OptimizerConfig(preconditioner="lbfgs")
    with pytest.raises(ContractError):
        train(problem, OptimizerConfig(batch_size=problem.num_samples + 1))
    with pytest.raises(ContractError):
        train(problem, OptimizerConfig(preconditioner="kfac"))


def test_decay_schedule():
    config = OptimizerConfig(eta=1.0, schedule="decay", decay_steps=10.0)
    assert config.learning_rate(0) == 1.0
    assert np.isclose(config.learning_rate(10), 0.5), "eta / (1 + t / T)"


def test_adam_preconditioner_first_step():
    """Test that Adam's first bias-corrected direction is sign(g)."""
    adam = AdamPreconditioner()
    direction = adam.apply(np.array([2.0, -0.5]))
    assert np.allclose(direction, [1.0, -1.0], atol=1e-6), "first step is the gradient sign"
    assert not adam.is_constant
    with pytest.raises(ContractError):
        adam.dense_matrix(2)


def test_adam_training_decreases_loss(small_problem):
    _, _, problem = small_problem
    trajectory = train(problem, OptimizerConfig(eta=0.01, preconditioner="adam", max_epochs=30))
    assert trajectory.final_loss < trajectory.losses[0], "Adam should make progress"


def test_distance_to_optimum_is_recorded(small_problem):
    _, _, problem = small_problem
    wstar = closed_form(problem)
    trajectory = train(problem, OptimizerConfig(eta=1.0, preconditioner="exact-inverse", max_epochs=2),
                       wstar=wstar)
    assert np.isclose(trajectory.records[0].dist_to_opt, np.linalg.norm(wstar)), "starts at ||w*||"
    assert trajectory.records[-1].dist_to_opt < 1e-8, "ends at the optimum"


def test_consecutive_error_stop():
    """Test the patience counter of the epoch-end stopping rule."""
    errors = iter([0.0, 0.0, 0.1, 0.0, 0.0, 0.0])
    rule = ConsecutiveErrorStop(lambda dw: next(errors), threshold=0.005, patience=3)
    decisions = [rule(epoch, None) for epoch in range(1, 7)]
    assert decisions == [False, False, False, False, False, True], "streak resets on a bad epoch"


def test_stop_rule_ends_training(small_problem):
    _, _, problem = small_problem
    trajectory = train(problem, OptimizerConfig(eta=0.01, max_epochs=50), stop_rule=lambda epoch, dw: epoch == 2)
    assert trajectory.stop_reason == "stop_rule", "stop rule should end the run"
    assert trajectory.records[-1].epoch == 2


def test_evaluate_problem_and_model(small_problem):
    """Test that scoring through the problem and the model agree."""
    model, data, problem = small_problem
    dw = closed_form(problem)
    assert evaluate(problem, dw) == evaluate(model, dw, data), "both paths score the same outputs"
    assert 0.0 <= evaluate(problem, dw) <= 1.0


def test_nonlinear_trainer_learns():
    """Test the reference trainer lowers the loss and reports w - w0."""
    model = make_model(5, hidden=(6,))
    data = make_data(6, per_class=10)
    for loss_name, eta in (("cross-entropy", 0.01), ("mse", 0.001)):
        config = OptimizerConfig(eta=eta, momentum=0.9, batch_size=8, max_epochs=20, loss=loss_name,
                                 weight_decay=1e-4, stop_tolerance=0.0)
        trajectory = train_nonlinear(model.spec, model.w0, data, config)
        assert trajectory.final_loss < trajectory.losses[0], f"{loss_name} loss should decrease"
        assert len(trajectory.records) == 21, "one record per epoch plus the start"
        w = model.w0.values + trajectory.final_dw
        assert evaluate_nonlinear(model, w, data) <= evaluate_nonlinear(model, model.w0.values, data) + 0.2


def test_nonlinear_trainer_rejects_kfac():
    model = make_model(0)
    with pytest.raises(ContractError):
        train_nonlinear(model.spec, model.w0, make_data(), OptimizerConfig(preconditioner="exact-inverse"))


def test_nonlinear_trainer_span_freezes_the_rest():
    model = make_model(2, hidden=(4,))
    data = make_data(3, per_class=6)
    span = parameter_span(model.spec, LINEARIZE_LAST)
    config = OptimizerConfig(eta=0.01, momentum=0.9, max_epochs=5, stop_tolerance=0.0)
    dw = train_nonlinear(model.spec, model.w0, data, config, span=span).final_dw
    frozen = np.ones(dw.size, dtype=bool)
    frozen[span] = False
    assert np.all(dw[frozen] == 0.0), "parameters outside the span never move"
    assert np.any(dw[span] != 0.0), "the span is trained"


def test_last_layer_mse_fine_tuning_equals_linearized_training():
    """Test that MSE fine-tuning of the final Dense block follows the last-layer quadratic exactly."""
    model = make_model(3, hidden=(5,))
    data = make_data(4, per_class=8)
    span = parameter_span(model.spec, LINEARIZE_LAST)
    config = OptimizerConfig(eta=0.002, momentum=0.9, max_epochs=15, stop_tolerance=0.0, loss="mse")
    nonlinear = train_nonlinear(model.spec, model.w0, data, config, span=span)
    problem = assemble(model, data, alpha=config.alpha, lam=0.0, scope=LINEARIZE_LAST)
    linear = train(problem, config)
    assert problem.dim == span.stop - span.start
    gap = relative(nonlinear.final_dw[span], linear.final_dw)
    assert gap < 1e-8, f"the network output is linear in its last layer, gap {gap:.2e}"
    assert np.isclose(nonlinear.final_loss, linear.final_loss, rtol=1e-8), "same objective at the end"


def test_linearized_cross_entropy_fit(small_problem):
    """Test the cross-entropy fit of the tangent model starts at CE(f0) and descends."""
    _, _, problem = small_problem
    log_probs = scipy.special.log_softmax(problem.f0, axis=1)
    initial = -float(np.mean(log_probs[np.arange(problem.num_samples), problem.labels]))
    config = OptimizerConfig(eta=0.01, momentum=0.9, max_epochs=50, stop_tolerance=0.0)
    trajectory = train_linearized_ce(problem, config)
    assert np.isclose(trajectory.losses[0], initial), "dw = 0 scores the base network"
    assert len(trajectory.records) == 51, "one record per epoch plus the start"
    assert trajectory.final_loss < trajectory.losses[0], "cross-entropy should decrease"


def test_linearized_cross_entropy_needs_outputs():
    problem = LinearizedProblem(J=[[1.0]], r=[1.0], num_samples=1, num_classes=1, lam=0.0)
    with pytest.raises(ContractError):
        train_linearized_ce(problem, OptimizerConfig())
