"""Tests for the ensemble Kalman prediction and pooled updates."""

import numpy as np
import pytest

from gppbed.eki import (
    EkiUpdateSpec,
    StackedTarget,
    kalman_gain,
    predict,
    stats_from_predictions,
    update,
    update_per_group,
)
from gppbed.errors import GainSolveFailure
from gppbed.forward import EvalCounter, LinearModel, Measurement
from gppbed.pooling import OuterSet, PooledObservation, PoolingWeights, make_pooled
from gppbed.statcore import Ensemble, Gaussian, RngStream, ensemble_mean_cov, sample_gaussian

MEAS = Measurement(np.zeros(1))


def scalar_identity(noise_var=1.0):
    return LinearModel(np.eye(1), Gaussian.scalar(0.0, noise_var))


def test_predict_counts_one_solve_per_member():
    counter = EvalCounter()
    ensemble = sample_gaussian(Gaussian.scalar(0.0, 1.0), 40, RngStream(0))
    stats = predict(ensemble, scalar_identity(), MEAS, counter)
    assert counter.count == 40
    assert stats.predictions.shape == (40, 1)


def test_large_ensemble_statistics_match_linear_identities():
    A = np.array([[1.0, 2.0], [0.5, -1.0]])
    C0 = np.diag([1.0, 2.0])
    model = LinearModel(A, Gaussian(np.zeros(2), np.eye(2)))
    ensemble = sample_gaussian(Gaussian(np.zeros(2), C0), 100_000, RngStream(21))
    stats = predict(ensemble, model, MEAS, EvalCounter())
    cross, forecast = C0 @ A.T, A @ C0 @ A.T
    assert np.linalg.norm(stats.P_thetaF - cross) < 0.02 * np.linalg.norm(cross)
    assert np.linalg.norm(stats.P_FF - forecast) < 0.02 * np.linalg.norm(forecast)


def test_constant_ensemble_has_zero_statistics():
    ensemble = Ensemble(np.full((5, 1), 2.0), predictions=np.full((5, 1), 2.0))
    stats = stats_from_predictions(ensemble)
    assert np.array_equal(stats.P_thetaF, np.zeros((1, 1)))
    assert np.array_equal(stats.P_FF, np.zeros((1, 1)))


def test_stochastic_update_reaches_conjugate_posterior():
    counter = EvalCounter()
    ensemble = sample_gaussian(Gaussian.scalar(0.0, 1.0), 100_000, RngStream(3))
    stats = predict(ensemble, scalar_identity(), MEAS, counter)
    before = counter.count
    target = PooledObservation(np.array([2.0]), np.eye(1))
    updated = update(ensemble, stats, EkiUpdateSpec("mean", True, target), RngStream(3).spawn(1))
    mean, cov = ensemble_mean_cov(updated)
    assert counter.count == before
    assert mean[0] == pytest.approx(1.0, rel=0.02)
    assert cov[0, 0] == pytest.approx(0.5, rel=0.02)


def test_stacked_and_mean_forms_agree_without_perturbation():
    ensemble = sample_gaussian(Gaussian.scalar(0.0, 1.0), 50, RngStream(9))
    stats = predict(ensemble, scalar_identity(), MEAS, EvalCounter())
    outer = OuterSet.homoskedastic([0.5, 1.5, 3.0], 1.0)
    nu = PoolingWeights.uniform(3)
    mean_form = update(ensemble, stats, EkiUpdateSpec("mean", False, make_pooled(outer, nu)), RngStream(0))
    stacked_form = update(ensemble, stats, EkiUpdateSpec("stacked", False, StackedTarget.from_outer(outer, nu)),
                          RngStream(0))
    assert np.max(np.abs(mean_form.members - stacked_form.members)) < 1e-10


def test_vanishing_gain_leaves_ensemble_unchanged():
    ensemble = sample_gaussian(Gaussian.scalar(0.0, 1.0), 30, RngStream(4))
    stats = predict(ensemble, scalar_identity(), MEAS, EvalCounter())
    target = PooledObservation(np.array([2.0]), np.array([[1e14]]))
    updated = update(ensemble, stats, EkiUpdateSpec("mean", False, target), RngStream(0))
    assert np.allclose(updated.members, ensemble.members, atol=1e-10)


def test_singular_innovation_raises():
    with pytest.raises(GainSolveFailure):
        kalman_gain(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))


def test_mismatched_target_rejected():
    with pytest.raises(ValueError):
        EkiUpdateSpec("stacked", True, PooledObservation(np.zeros(1), np.eye(1)))


def test_grouped_updates_reuse_predictions():
    counter = EvalCounter()
    rng = RngStream(17)
    ensemble = sample_gaussian(Gaussian.scalar(0.0, 1.0), 64, rng.spawn(0))
    stats = predict(ensemble, scalar_identity(), MEAS, counter)
    groups = [PooledObservation(np.array([v]), np.eye(1), label=f"group-{k + 1}")
              for k, v in enumerate([-2.0, 0.0, 2.0])]
    before = counter.count
    outputs = update_per_group(ensemble, stats, groups, rng.spawn(1))
    assert counter.count == before
    for k, (pooled, out) in enumerate(zip(groups, outputs)):
        single = update(ensemble, stats, EkiUpdateSpec("mean", True, pooled), rng.spawn(1).spawn(k))
        assert np.array_equal(out.members, single.members)
        assert out.tag == pooled.label
    again = update_per_group(ensemble, stats, groups, rng.spawn(1))
    assert all(np.array_equal(a.members, b.members) for a, b in zip(outputs, again))


def test_single_group_matches_plain_update():
    ensemble = sample_gaussian(Gaussian.scalar(0.0, 1.0), 20, RngStream(2))
    stats = predict(ensemble, scalar_identity(), MEAS, EvalCounter())
    pooled = PooledObservation(np.array([1.0]), np.eye(1))
    [grouped] = update_per_group(ensemble, stats, [pooled], RngStream(2, 1))
    plain = update(ensemble, stats, EkiUpdateSpec("mean", True, pooled), RngStream(2, 1).spawn(0))
    assert np.array_equal(grouped.members, plain.members)


def test_deterministic_update_contracts_forecast_covariance():
    A = np.array([[1.0, -0.5], [0.3, 2.0]])
    model = LinearModel(A, Gaussian(np.zeros(2), 0.5 * np.eye(2)))
    ensemble = sample_gaussian(Gaussian(np.zeros(2), np.eye(2)), 200, RngStream(6))
    stats = predict(ensemble, model, MEAS, EvalCounter())
    target = PooledObservation(np.array([0.4, -0.2]), 0.5 * np.eye(2))
    updated = update(ensemble, stats, EkiUpdateSpec("mean", False, target), RngStream(0))
    _, cov = ensemble_mean_cov(updated)
    assert np.linalg.eigvalsh(stats.P_FF - A @ cov @ A.T).min() >= -1e-8
