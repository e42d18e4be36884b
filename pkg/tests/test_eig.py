"""Tests for EIG gradients, design ascent and estimator-variance studies."""

import numpy as np
import pytest

from gppbed.eig import (
    DesignState,
    GradEstimate,
    GradientProblem,
    ascend_design,
    eig_gradient,
    eig_value_gaussian_linear,
    estimate_grad_std,
    generate_outer,
    inner_gradient,
    pipeline_gradient,
    variance_study,
)
from gppbed.eki import predict
from gppbed.forward import EvalCounter, Measurement, PdeModel, SourceSpec, linear_toy_model
from gppbed.isampling import Grouping, build_proposals, trivial_grouping
from gppbed.oracle import fd_gradient
from gppbed.seqbed import SeqState, SequentialSetup, stage_time
from gppbed.statcore import STREAM_EKI, STREAM_OUTER, STREAM_PRIOR, Gaussian, RngStream, sample_gaussian

TOY_PRIOR = Gaussian(np.zeros(2), np.eye(2))


def toy_problem(n_outer=40, n_inner=40, grouping=True):
    return GradientProblem(model=linear_toy_model(), prior=TOY_PRIOR, n_outer=n_outer, n_inner=n_inner,
                           grouping=grouping)


def test_eig_of_uninformative_map_is_zero():
    assert eig_value_gaussian_linear(Gaussian.scalar(0.0, 1.0), np.zeros((1, 1)), np.eye(1)) == pytest.approx(0.0)


def test_scalar_eig_value():
    assert eig_value_gaussian_linear(Gaussian.scalar(0.0, 1.0), np.eye(1), np.eye(1)) == pytest.approx(
        0.5 * np.log(2.0))


def test_eig_grows_with_gain():
    prior = Gaussian.scalar(0.0, 1.0)
    values = [eig_value_gaussian_linear(prior, np.array([[a]]), np.eye(1)) for a in np.linspace(0.0, 3.0, 13)]
    assert np.all(np.diff(values) > 0)


def test_eig_accepts_design_dependent_map():
    model = linear_toy_model()
    d = np.array([0.2, 0.4])
    direct = eig_value_gaussian_linear(TOY_PRIOR, model.matrix(d), model.noise.cov)
    assert eig_value_gaussian_linear(TOY_PRIOR, model.design_map, model.noise.cov, d) == pytest.approx(direct)


def test_pipeline_ledger_with_and_without_grouping():
    meas = Measurement(np.array([0.2, 0.6]), noise_var=0.25)
    counter = EvalCounter()
    result = pipeline_gradient(toy_problem(grouping=False), meas, RngStream(4), counter)
    assert result.ledger == {"outer": 40, "predict": 40, "proposal": 40}
    assert sum(result.ledger.values()) == counter.count
    assert result.estimate.contributions.shape == (40, 2)

    counter = EvalCounter()
    result = pipeline_gradient(toy_problem(grouping=True), meas, RngStream(4), counter)
    assert result.ledger["proposal"] == result.estimate.n_sets * 40
    assert result.estimate.n_sets == len(result.grouping.index_sets())
    assert sum(result.ledger.values()) == counter.count


def test_grouped_pipeline_costs_n_plus_j_plus_k_times_j():
    meas = Measurement(np.array([0.2, 0.6]), noise_var=0.25)
    problem = GradientProblem(model=linear_toy_model(), prior=TOY_PRIOR, n_outer=200, n_inner=50, n_groups=3,
                              threshold=25.0, trigger_fraction=0.0)
    counter = EvalCounter()
    result = pipeline_gradient(problem, meas, RngStream(4), counter)
    assert result.grouping.triggered
    assert result.estimate.n_sets == 3
    assert result.ledger == {"outer": 200, "predict": 50, "proposal": 3 * 50}
    assert sum(result.ledger.values()) == counter.count == 200 + 50 + 3 * 50


def test_single_group_path_matches_trivial_grouping():
    model = linear_toy_model()
    meas = Measurement(np.array([0.1, 0.8]), noise_var=0.25)
    rng = RngStream(12)
    counter = EvalCounter()
    outer = generate_outer(TOY_PRIOR, model, meas, 20, rng.spawn(STREAM_OUTER), counter)
    stats = predict(sample_gaussian(TOY_PRIOR, 30, rng.spawn(STREAM_PRIOR)), model, meas, counter)

    trivial = trivial_grouping(20)
    single = Grouping(np.array([], dtype=int), (np.arange(20),), 1.0, np.zeros(20))
    a = eig_gradient(outer, build_proposals(outer, trivial, stats, rng.spawn(STREAM_EKI)), model, meas, counter)
    b = eig_gradient(outer, build_proposals(outer, single, stats, rng.spawn(STREAM_EKI)), model, meas, counter)
    assert np.array_equal(a.value, b.value)
    assert np.array_equal(a.contributions, b.contributions)
    assert a.forward_cost == b.forward_cost == 30


def test_same_seed_same_gradient():
    meas = Measurement(np.array([0.3, 0.3]), noise_var=0.25)
    first = pipeline_gradient(toy_problem(), meas, RngStream(77), EvalCounter())
    second = pipeline_gradient(toy_problem(), meas, RngStream(77), EvalCounter())
    assert np.array_equal(first.estimate.value, second.estimate.value)


@pytest.mark.slow
def test_gradient_vanishes_at_symmetric_design():
    meas = Measurement(np.array([0.5, 0.5]), noise_var=0.25)
    estimate = pipeline_gradient(toy_problem(500, 500), meas, RngStream(31), EvalCounter()).estimate
    assert np.all(np.abs(estimate.value) < 4.0 * estimate.standard_error)


@pytest.mark.slow
@pytest.mark.parametrize("design", [(-0.5, 0.3), (0.0, 0.3), (0.5, 0.3), (1.0, 0.3), (1.5, 0.3)])
def test_gradient_matches_closed_form(design):
    model = linear_toy_model()
    d = np.array(design)
    meas = Measurement(d, noise_var=0.25)
    estimate = pipeline_gradient(toy_problem(500, 500), meas, RngStream(2024), EvalCounter()).estimate

    def eig(x):
        return eig_value_gaussian_linear(TOY_PRIOR, model.design_map, model.noise.cov, x)

    reference = fd_gradient(eig, d, h=1e-4)
    assert np.all(np.abs(estimate.value - reference) < 4.0 * estimate.standard_error + 1e-3)


@pytest.mark.slow
def test_parametric_cost_is_540_solves():
    model = PdeModel(source=SourceSpec(theta=(0.3, 0.3, 0.2, 3.0)), unknowns="strength")
    problem = GradientProblem(model=model, prior=Gaussian.scalar(3.0, 0.25), n_outer=180, n_inner=180,
                              grouping=False)
    counter = EvalCounter()
    result = pipeline_gradient(problem, Measurement(np.array([0.5, 0.5]), time=0.055, noise_var=0.0025),
                               RngStream(0), counter)
    assert result.ledger == {"outer": 180, "predict": 180, "proposal": 180}
    assert counter.count == 540


def test_constant_estimates_have_zero_std():
    constant = GradEstimate(np.array([1.0, -2.0]), np.zeros((3, 2)), np.ones(3), 0)
    assert np.array_equal(estimate_grad_std(lambda r: constant, 5), np.zeros(2))
    with pytest.raises(ValueError):
        estimate_grad_std(lambda r: constant, 4)


def test_variance_study_table():
    meas = Measurement(np.array([0.2, 0.6]), noise_var=0.25)
    problem = toy_problem(20, 20)
    counter = EvalCounter()
    outer = generate_outer(problem.prior, problem.model, meas, 20, RngStream(3).spawn(STREAM_OUTER), counter)
    table = variance_study(problem, outer, meas, RngStream(3), counter, repeats=5)
    assert list(table.columns) == ["method", "inner_size", "total_inner", "component", "std"]
    assert len(table) == 6
    assert (table["std"] >= 0).all()
    ungrouped = table[table["method"] == "ungrouped"]
    assert set(ungrouped["inner_size"]) <= {20, int(table["total_inner"].max())}


@pytest.mark.slow
def test_grouping_reduces_gradient_spread_on_network_errors():
    setup = SequentialSetup(case="structural", grid_size=32, n_outer=500, n_inner=500)
    state = SeqState.initial(setup, 0)
    model = setup.error_model(np.asarray(setup.truth_location))
    problem = GradientProblem(model=model, prior=setup.error_prior(state.theta_error), n_outer=500, n_inner=500,
                              n_groups=3)
    meas = Measurement(np.array([0.5, 0.5]), stage_time(1), setup.noise_var)
    counter = EvalCounter()
    rng = RngStream(7)
    outer = generate_outer(problem.prior, model, meas, 500, rng.spawn(STREAM_OUTER), counter)
    table = variance_study(problem, outer, meas, rng, counter, repeats=10)

    def spread(method, total):
        rows = table[(table["method"] == method) & (table["total_inner"] == total)]
        return rows.sort_values("component")["std"].to_numpy()

    grouped = spread("grouped", 1500)
    ungrouped_small = spread("ungrouped", 500)
    ungrouped_large = spread("ungrouped", 1500)
    assert grouped.shape == ungrouped_large.shape == (2,)
    assert np.all(grouped <= 0.7 * ungrouped_large)
    assert np.all(np.abs(ungrouped_large - ungrouped_small) <= 0.25 * ungrouped_small)


def test_inner_gradient_keeps_outer_fixed():
    meas = Measurement(np.array([0.2, 0.6]), noise_var=0.25)
    problem = toy_problem(15, 25)
    counter = EvalCounter()
    outer = generate_outer(problem.prior, problem.model, meas, 15, RngStream(1), counter)
    before = counter.count
    result = inner_gradient(problem, outer, meas, RngStream(2), counter, grouping=False)
    assert counter.count - before == 25 + 25
    assert result.ledger == {"predict": 25, "proposal": 25}


def test_zero_gradient_is_a_fixed_point():
    state = DesignState(np.array([0.2, 0.4]), 0.1, -0.5, 1.5)
    out = ascend_design(state, lambda d: np.zeros(2), steps=5)
    assert np.array_equal(out.design, state.design)
    assert out.iteration == 5
    assert len(out.trajectory) == 5


def test_quadratic_surrogate_converges():
    target = np.array([0.7, 0.1])
    state = DesignState(np.array([-0.4, 1.2]), 0.1, -0.5, 1.5)
    out = ascend_design(state, lambda d: -2.0 * (d - target), steps=200)
    assert out.design == pytest.approx(target, abs=1e-6)


def test_step_leaving_box_lands_on_boundary():
    state = DesignState(np.array([1.4, 0.0]), 1.0, -0.5, 1.5)
    out = ascend_design(state, lambda d: np.array([1.0, -3.0]), steps=1)
    assert np.array_equal(out.design, np.array([1.5, -0.5]))
