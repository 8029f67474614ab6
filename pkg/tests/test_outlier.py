from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from calibrate_lab import models, outlier
from calibrate_lab.outlier import IsolationTree, OutlierConfig
from oracles import knn_full_sort


def gaussian_cloud(n=300, d=2, seed=0, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal((n, d))


@pytest.fixture(scope="module")
def cloud_models():
    return outlier.fit(gaussian_cloud(), OutlierConfig(seed=0))


def test_kde_two_point_hand_case():
    train = np.array([[0.0, 0.0], [1.0, 0.0]])
    fitted = outlier.fit(train, OutlierConfig(k=1))
    # per-dim population variances 0.25 and 0; n=2, d=2
    h = 2.0 * 0.125 * 2.0 ** (-1.0 / 3.0)
    assert fitted.kde_h == pytest.approx(h, rel=1e-15)
    expected = (math.exp(-1.0 / h) + math.exp(-2.0 / h)) / 2
    assert outlier.kde_score(fitted, [0.0, 1.0]) == pytest.approx(expected, rel=1e-15)


def test_single_feature_training_set():
    fitted = outlier.fit([[0.3, -0.7]], OutlierConfig(k=1))
    assert outlier.kde_score(fitted, [0.3, -0.7]) == 1.0
    assert outlier.kde_score(fitted, [1e3, 1e3]) == 0.0
    assert outlier.knn_score(fitted, [0.3, -0.7]) == 0.0
    assert all(np.all(t.feature == -1) for t in fitted.trees)
    with pytest.raises(outlier.OutlierError):
        outlier.fit([[0.3, -0.7]], OutlierConfig(k=2))


def test_too_few_or_bad_features():
    with pytest.raises(outlier.OutlierError):
        outlier.fit(gaussian_cloud(10), OutlierConfig(k=10))
    with pytest.raises(outlier.OutlierError):
        outlier.fit(np.array([[0.0, np.inf]] * 20))
    with pytest.raises(outlier.OutlierError):
        outlier.fit(np.zeros((0, 2)))


def test_query_dimension_must_match(cloud_models):
    with pytest.raises(outlier.OutlierError):
        outlier.score_vector(cloud_models, [0.0, 0.0, 0.0])


def test_forest_score_is_half_at_average_depth(cloud_models):
    psi = cloud_models.config.subsample
    leaf = IsolationTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([psi]))
    fitted = dataclasses.replace(cloud_models, trees=[leaf], forest_c=outlier.average_path_length(psi))
    assert outlier.iforest_score(fitted, [0.0, 0.0]) == pytest.approx(0.5, abs=1e-15)


def test_forest_normalizer():
    assert outlier.average_path_length(2) == pytest.approx(1.0, abs=1e-15)
    assert outlier.average_path_length(256) == pytest.approx(2 * (math.log(255) + 0.5772156649) - 2 * 255 / 256,
                                                             abs=5e-3)
    assert outlier.average_path_length(1) == 0.0


def test_forest_isolates_far_query_in_one_dimension():
    fitted = outlier.fit(np.arange(100.0)[:, None], OutlierConfig(seed=3))
    assert outlier.iforest_score(fitted, [500.0]) > outlier.iforest_score(fitted, [50.0])


def test_ocsvm_formula_substitution(cloud_models):
    alpha = np.zeros(len(cloud_models.train_features))
    alpha[0] = 1.0
    fitted = dataclasses.replace(cloud_models, svm_alpha=alpha)
    z0 = cloud_models.train_features[0]
    assert outlier.ocsvm_score(fitted, z0) == pytest.approx(1.0 - fitted.svm_rho, abs=1e-15)
    assert outlier.ocsvm_score(fitted, z0 + 1e4) == pytest.approx(-fitted.svm_rho, abs=1e-15)


def test_ocsvm_prefers_cluster_centre():
    fitted = outlier.fit(gaussian_cloud(200, scale=0.1))
    assert outlier.ocsvm_score(fitted, [0.0, 0.0]) > outlier.ocsvm_score(fitted, [0.5, 0.0])


def test_ocsvm_dual_is_on_simplex(cloud_models):
    a = cloud_models.svm_alpha
    assert a.min() >= -1e-9
    assert abs(a.sum() - 1.0) < 1e-9
    assert cloud_models.warnings == []


def test_ocsvm_non_convergence_is_a_recorded_warning():
    fitted = outlier.fit(gaussian_cloud(100), OutlierConfig(svm_max_sweeps=1, svm_tol=1e-15))
    assert len(fitted.warnings) == 1 and "OCSVM" in fitted.warnings[0]
    assert abs(fitted.svm_alpha.sum() - 1.0) < 1e-9
    assert np.isfinite(outlier.ocsvm_score(fitted, [0.0, 0.0]))


def test_ocsvm_offset_puts_nu_fraction_outside(cloud_models):
    vals = outlier.ocsvm_scores(cloud_models, cloud_models.train_features)
    m = math.ceil(0.1 * len(vals))
    assert np.sum(vals < 0) == m - 1
    assert np.sum(vals <= 0) >= m


def test_knn_hand_cases():
    train = np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]])
    fitted = outlier.fit(train, OutlierConfig(k=2))
    assert outlier.knn_score(fitted, [0.0, 0.0]) == 2.0
    assert outlier.knn_score(fitted, [1.0, 0.0], k=1) == 0.0
    assert outlier.knn_score(fitted, [0.0, 0.0], k=3) >= outlier.knn_score(fitted, [0.0, 0.0], k=1)
    with pytest.raises(outlier.OutlierError):
        outlier.knn_score(fitted, [0.0, 0.0], k=4)


def test_knn_matches_full_sort_exactly(cloud_models):
    rng = np.random.default_rng(5)
    train = cloud_models.train_features.tolist()
    for q in rng.normal(0, 2, (25, 2)):
        for k in (1, 10, 37):
            assert outlier.knn_score(cloud_models, q, k) == knn_full_sort(train, q.tolist(), k)


def test_duplicate_features_fit():
    train = np.vstack([np.ones((15, 2)), gaussian_cloud(5)])
    fitted = outlier.fit(train, OutlierConfig(k=10))
    assert outlier.knn_score(fitted, [1.0, 1.0]) == 0.0
    assert 0.0 < outlier.kde_score(fitted, [1.0, 1.0]) <= 1.0
    all_same = outlier.fit(np.ones((12, 3)), OutlierConfig(k=10))
    s = outlier.score_vector(all_same, [1.0, 1.0, 1.0])
    assert s.kde == 1.0 and s.knn == 0.0 and np.isfinite(s.ocsvm)


def test_score_ranges(cloud_models):
    rng = np.random.default_rng(1)
    s = outlier.score_matrix(cloud_models, rng.normal(0, 3, (200, 2)))
    assert np.all((s[:, 0] >= 0) & (s[:, 0] <= 1))
    assert np.all((s[:, 1] > 0) & (s[:, 1] <= 1))
    assert np.all(s[:, 3] >= 0)


@pytest.fixture(scope="module")
def compact_models():
    z = gaussian_cloud(1500, seed=4)
    return outlier.fit(z[np.linalg.norm(z, axis=1) <= 2.0][:300])


RAY_ANGLES = np.linspace(0.0, 2 * math.pi, 16, endpoint=False)


def ray_scores(fitted, angle):
    direction = np.array([math.cos(angle), math.sin(angle)])
    centroid = fitted.train_features.mean(axis=0)
    return outlier.score_matrix(fitted, centroid + np.linspace(2.0, 8.0, 25)[:, None] * direction)


@pytest.mark.parametrize("angle", RAY_ANGLES)
def test_smooth_scores_move_outward_along_a_ray(compact_models, angle):
    s = ray_scores(compact_models, angle)
    for col, sign in ((0, -1), (2, -1), (3, 1)):  # kde and ocsvm fall, knn rises
        assert np.all(sign * np.diff(s[:, col]) >= 0), col
        assert sign * (s[-1, col] - s[0, col]) > 0, col


@pytest.mark.parametrize("angle", RAY_ANGLES)
def test_forest_score_rises_along_a_ray(compact_models, angle):
    s = ray_scores(compact_models, angle)[:, 1]
    centre = outlier.iforest_score(compact_models, compact_models.train_features.mean(axis=0))
    assert centre < s[0]
    # saturates once the query clears every cut; axis-parallel cuts leave small dips before that
    assert s[-1] == s.max()
    assert np.diff(s).min() > -0.015


def test_fit_is_deterministic():
    z = gaussian_cloud(400, 3, seed=2)
    a = outlier.to_dict(outlier.fit(z, OutlierConfig(seed=9)))
    b = outlier.to_dict(outlier.fit(z, OutlierConfig(seed=9)))
    assert a == b


def test_large_training_sets_are_subsampled():
    fitted = outlier.fit(gaussian_cloud(2500), OutlierConfig(max_train=2000))
    assert fitted.train_features.shape == (2000, 2)


def test_serialization_round_trip(tmp_path, cloud_models):
    path = outlier.save(tmp_path / "o.json", cloud_models)
    again = outlier.load(path)
    q = np.random.default_rng(0).normal(0, 2, (30, 2))
    np.testing.assert_array_equal(outlier.score_matrix(again, q), outlier.score_matrix(cloud_models, q))
    bad = outlier.to_dict(cloud_models) | {"format": "other"}
    with pytest.raises(outlier.OutlierError):
        outlier.from_dict(bad)


@pytest.fixture(scope="module")
def feature_setup():
    arch = models.MlpArch(2, (6, 5), 2)
    phi = models.init_variational(arch, np.random.default_rng(0), init_std=0.3)
    x = np.random.default_rng(1).standard_normal((40, 2))
    fitted = outlier.fit(models.features(phi.mean_params(), x), OutlierConfig(k=5))
    return phi, x, fitted


def test_zero_variance_posterior_average_is_single_score(feature_setup):
    phi, x, fitted = feature_setup
    degenerate = models.VariationalParams(phi.arch, phi.mu, np.full_like(phi.rho, -np.inf))
    avg = outlier.avg_score_vector(fitted, degenerate, x[3], 20, np.random.default_rng(0))
    single = outlier.score_vector(fitted, models.features(phi.mean_params(), x[3:4]))
    assert avg == pytest.approx(single, abs=1e-12)


def test_average_recomputes_features_per_draw(feature_setup):
    phi, x, fitted = feature_setup
    got = outlier.avg_score_matrix(fitted, phi, x, 2, np.random.default_rng(4))
    rng = np.random.default_rng(4)
    draws = [outlier.score_matrix(fitted, models.features(models.sample_theta(phi, rng), x)) for _ in range(2)]
    np.testing.assert_allclose(got, (draws[0] + draws[1]) / 2, rtol=1e-15, atol=1e-15)
    assert not np.allclose(draws[0], draws[1])


def test_point_model_average_needs_no_rng(feature_setup):
    phi, x, fitted = feature_setup
    point = phi.mean_params()
    np.testing.assert_array_equal(outlier.avg_score_matrix(fitted, point, x),
                                  outlier.score_matrix(fitted, models.features(point, x)))
    with pytest.raises(outlier.OutlierError):
        outlier.avg_score_matrix(fitted, phi, x)
