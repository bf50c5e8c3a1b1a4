import logging
import math

import numpy as np
import pytest

from gmmcalib.config import GmmConfig
from gmmcalib.errors import DegenerateAlignment, InvalidComponentCount, NumericUnderflow, TooFewPoints
from gmmcalib.gmm import (
    GmmModel,
    e_step,
    initialize_model,
    joint_register,
    log_likelihood,
    m_step,
    weighted_rigid_alignment,
)
from gmmcalib.pointcloud import PointCloud
from gmmcalib.se3 import RigidTransform, compose, inverse, random_transform, rotation_angle
from tests.conftest import target_scene


def test_initialize_model_rejects_tiny_mixtures(scene_points):
    with pytest.raises(InvalidComponentCount):
        initialize_model([scene_points], 7, seed=0)


def test_initialize_model_places_means_in_the_inflated_box(scene_points):
    model = initialize_model([scene_points, scene_points + 0.1], 120, seed=3)
    assert model.n_components == 120
    union = np.vstack([scene_points, scene_points + 0.1])
    lo, hi = union.min(axis=0), union.max(axis=0)
    margin = (hi - lo) * 0.05 + 1e-9
    assert np.all(model.means >= lo - margin)
    assert np.all(model.means <= hi + margin)
    assert math.fsum(model.weights) + model.outlier_weight == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(model.variances, (np.linalg.norm(hi - lo) / 10) ** 2)


def test_initialize_model_is_seeded(scene_points):
    a = initialize_model([scene_points], 50, seed=11)
    b = initialize_model([scene_points], 50, seed=11)
    c = initialize_model([scene_points], 50, seed=12)
    np.testing.assert_array_equal(a.means, b.means)
    assert not np.array_equal(a.means, c.means)


def test_model_rejects_weights_that_do_not_sum_to_one():
    with pytest.raises(ValueError):
        GmmModel(np.zeros((2, 3)), np.ones(2), np.array([0.5, 0.5]), 0.1, 1.0)


def test_model_survives_serialisation(scene_points):
    model = initialize_model([scene_points], 16, seed=0)
    loaded = GmmModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(loaded.means, model.means)
    assert loaded.outlier_density == model.outlier_density


def test_reconstruction_drops_light_components():
    weights = np.array([0.5, 0.3, 0.15, 0.05 - 1e-3]) * 0.9 / (1.0 - 1e-3)
    model = GmmModel(np.eye(4, 3), np.ones(4), weights, 0.1, 1.0)
    # threshold 0.5 / 4 = 0.125
    assert len(model.reconstruction(0.5)) == 3
    assert len(model.reconstruction(0.0)) == 4


def test_e_step_rows_sum_to_one(scene_points):
    model = initialize_model([scene_points], 40, seed=0)
    resp = e_step([scene_points], [RigidTransform.identity()], model)
    totals = resp.posteriors[0].sum(axis=1) + resp.outlier[0]
    np.testing.assert_allclose(totals, 1.0, atol=1e-12)
    assert np.isfinite(resp.log_likelihood)


def test_e_step_uses_the_transforms(scene_points):
    model = initialize_model([scene_points], 40, seed=0)
    shift = RigidTransform.from_translation(100.0, 0.0, 0.0)
    near = log_likelihood([scene_points], [RigidTransform.identity()], model)
    far = log_likelihood([scene_points], [shift], model)
    assert far < near


def test_e_step_raises_when_every_term_vanishes():
    model = GmmModel(np.zeros((8, 3)), np.full(8, 1e-300), np.full(8, 1 / 8), 0.0, 1.0)
    points = np.array([[1e10, 0.0, 0.0]] * 10)
    with pytest.raises(NumericUnderflow), np.errstate(over="ignore"):
        e_step([points], [RigidTransform.identity()], model)


def test_weighted_rigid_alignment_recovers_a_transform(rng, scene_points):
    truth = random_transform(rng, max_angle=0.8, max_translation=2.0)
    weights = rng.uniform(0.5, 2.0, size=len(scene_points))
    estimate = weighted_rigid_alignment(scene_points, truth.apply(scene_points), weights)
    np.testing.assert_allclose(estimate.as_matrix(), truth.as_matrix(), atol=1e-9)


def test_weighted_rigid_alignment_ignores_zero_weight_outliers(rng, scene_points):
    truth = random_transform(rng, max_angle=0.3)
    target = truth.apply(scene_points)
    target[:50] += 5.0
    weights = np.ones(len(scene_points))
    weights[:50] = 0.0
    estimate = weighted_rigid_alignment(scene_points, target, weights)
    np.testing.assert_allclose(estimate.as_matrix(), truth.as_matrix(), atol=1e-9)


def test_weighted_rigid_alignment_rejects_collinear_points():
    line = np.column_stack([np.linspace(0, 1, 20), np.zeros(20), np.zeros(20)])
    with pytest.raises(DegenerateAlignment):
        weighted_rigid_alignment(line, line, np.ones(20))


def test_weighted_rigid_alignment_rejects_zero_weights(scene_points):
    with pytest.raises(DegenerateAlignment):
        weighted_rigid_alignment(scene_points, scene_points, np.zeros(len(scene_points)))


def test_m_step_keeps_the_mixture_normalised(scene_points):
    model = initialize_model([scene_points], 40, seed=0)
    identity = [RigidTransform.identity()]
    transforms, updated = m_step([scene_points], e_step([scene_points], identity, model), model)
    assert len(transforms) == 1
    assert math.fsum(updated.weights) + updated.outlier_weight == pytest.approx(1.0, abs=1e-9)
    assert np.all(updated.variances >= 1e-6)


def test_m_step_floors_the_variance():
    points = np.repeat(np.eye(3), 10, axis=0) + np.array([0.0, 0.0, 1e-9])
    model = GmmModel(np.eye(3), np.full(3, 0.01), np.full(3, 0.9 / 3), 0.1, 1.0)
    resp = e_step([points], [RigidTransform.identity()], model)
    _, updated = m_step([points], resp, model, variance_floor=1e-4)
    np.testing.assert_allclose(updated.variances, 1e-4)


def test_joint_register_needs_two_observations(scene_points):
    with pytest.raises(TooFewPoints):
        joint_register([scene_points])


def test_joint_register_needs_ten_points_per_observation(scene_points):
    with pytest.raises(TooFewPoints):
        joint_register([scene_points, scene_points[:9]])


def test_joint_register_recovers_the_relative_transform(rng, small_error):
    first = target_scene(rng, 600) + rng.normal(0.0, 0.003, size=(1800, 3))
    second = small_error.apply(target_scene(rng, 600) + rng.normal(0.0, 0.003, size=(1800, 3)))
    result = joint_register([first, second], GmmConfig(components=90, seed=5))
    relative = compose(inverse(result.transforms[1]), result.transforms[0])
    residual = compose(inverse(relative), small_error)
    assert result.converged
    assert np.linalg.norm(residual.translation) < 0.015
    assert math.degrees(rotation_angle(residual)) < 0.5


def test_joint_register_log_likelihood_does_not_decrease(rng, small_error):
    first = PointCloud(target_scene(rng, 300))
    second = PointCloud(small_error.apply(target_scene(rng, 300)))
    result = joint_register([first, second], GmmConfig(components=40, seed=1, max_iterations=30))
    trace = np.array(result.log_likelihood_trace)
    assert len(trace) == result.iterations + 1
    assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1]))


def test_joint_register_reports_missing_convergence(rng, caplog):
    points = [target_scene(rng, 100), target_scene(rng, 100)]
    with caplog.at_level(logging.WARNING):
        result = joint_register(points, GmmConfig(components=16, max_iterations=1))
    assert not result.converged
    assert result.iterations == 1
    assert "did not converge" in caplog.text


def test_joint_register_is_deterministic_for_a_seed(rng):
    points = [target_scene(rng, 100), target_scene(rng, 100) + 0.02]
    config = GmmConfig(components=20, seed=9, max_iterations=10, threads=1)
    a = joint_register(points, config)
    b = joint_register(points, config)
    np.testing.assert_array_equal(a.transforms[1].as_matrix(), b.transforms[1].as_matrix())
    assert a.log_likelihood_trace == b.log_likelihood_trace


def test_e_step_matches_the_mixture_density_by_hand():
    points = np.array(
        [[0.1, 0.2, -0.1], [1.2, 0.9, 0.3], [-0.8, 0.0, 0.5], [2.5, -1.0, 1.0], [0.4, 0.4, 0.4]]
    )
    means = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 0.5, 0.5]])
    variances = np.array([0.5, 1.0, 2.0])
    weights = np.array([0.5, 0.25, 0.15])
    model = GmmModel(means, variances, weights, 0.1, 0.05)

    expected_posteriors, expected_outlier, expected_ll = [], [], 0.0
    for x in points:
        terms = [
            p * (2.0 * math.pi * s2) ** -1.5 * math.exp(-float(np.sum((x - mu) ** 2)) / (2.0 * s2))
            for mu, s2, p in zip(means, variances, weights, strict=True)
        ]
        outlier = 0.1 * 0.05
        total = sum(terms) + outlier
        expected_posteriors.append([t / total for t in terms])
        expected_outlier.append(outlier / total)
        expected_ll += math.log(total)

    resp = e_step([points], [RigidTransform.identity()], model)
    np.testing.assert_allclose(resp.posteriors[0], expected_posteriors, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(resp.outlier[0], expected_outlier, rtol=1e-12, atol=1e-15)
    assert resp.log_likelihood == pytest.approx(expected_ll, rel=1e-12)


def test_joint_register_is_invariant_to_a_common_frame_change(rng, small_error):
    first = target_scene(rng, 150)
    second = small_error.apply(target_scene(rng, 150))
    model = initialize_model([first, second], 30, seed=2)
    frame = random_transform(rng, max_angle=0.5, max_translation=3.0)
    moved_model = GmmModel(
        frame.apply(model.means), model.variances, model.weights, model.outlier_weight, model.outlier_density
    )
    config = GmmConfig(components=30, seed=2, max_iterations=5, threads=1)

    plain = joint_register([first, second], config, initial_model=model)
    moved = joint_register([first, second], config, initial_transforms=[frame, frame], initial_model=moved_model)

    for a, b in zip(plain.transforms, moved.transforms, strict=True):
        np.testing.assert_allclose(b.as_matrix(), compose(frame, a).as_matrix(), atol=1e-7)
    plain_relative = compose(inverse(plain.transforms[1]), plain.transforms[0])
    moved_relative = compose(inverse(moved.transforms[1]), moved.transforms[0])
    np.testing.assert_allclose(moved_relative.as_matrix(), plain_relative.as_matrix(), atol=1e-7)
    np.testing.assert_allclose(moved.log_likelihood_trace, plain.log_likelihood_trace, rtol=1e-9)


@pytest.mark.slow
def test_joint_register_log_likelihood_is_monotone_to_nine_digits(rng, small_error):
    first = target_scene(rng, 400) + rng.normal(0.0, 0.005, size=(1200, 3))
    second = small_error.apply(target_scene(rng, 400) + rng.normal(0.0, 0.005, size=(1200, 3)))
    result = joint_register([first, second], GmmConfig(components=60, seed=4, max_iterations=60, threads=1))
    trace = np.array(result.log_likelihood_trace)
    assert len(trace) > 2
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))
