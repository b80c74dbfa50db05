import numpy as np
import pytest

from backflow.diagnostics import (
    ConfigPoint,
    cosine,
    curve_slope,
    dose_response,
    linear_cka,
    pca_project,
)
from backflow.optimizer import amplification_factor


def test_cosine_basic_values():
    v = np.array([1.0, 2.0, 3.0])
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine(v, -v) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_zero_norm_is_degenerate_zero():
    assert cosine([0.0, 0.0], [1.0, 2.0]) == 0.0


def test_cosine_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        cosine([1, 2], [1, 2, 3])


def test_cka_self_is_one():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 6))
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)


def test_cka_rotation_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(25, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)


def test_cka_scale_invariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(25, 5))
    y = rng.normal(size=(25, 7))
    assert linear_cka(x, 3.7 * x) == pytest.approx(1.0, abs=1e-9)
    assert linear_cka(x, y) == pytest.approx(linear_cka(5.0 * x, 0.2 * y), abs=1e-9)


def test_cka_range_and_errors():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 4))
    y = rng.normal(size=(20, 6))
    assert 0.0 <= linear_cka(x, y) <= 1.0
    with pytest.raises(ValueError, match="zero centered"):
        linear_cka(np.ones((10, 3)), y[:10])
    with pytest.raises(ValueError, match="same examples"):
        linear_cka(x, y[:10])


def test_pca_identical_matrices_project_to_origin():
    m = np.random.default_rng(4).random((8, 3))
    projection = pca_project([m, m.copy(), m.copy(), m.copy()])
    assert np.allclose(projection.points, 0.0, atol=1e-15)
    assert projection.explained_variance == (0.0, 0.0)


def test_pca_collinear_points_have_zero_second_component():
    rng = np.random.default_rng(5)
    base = rng.random((4, 3))
    direction = rng.random((4, 3))
    mats = [base + t * direction for t in (0.0, 1.0, 2.0, 3.0)]
    projection = pca_project(mats)
    assert projection.explained_variance[1] == pytest.approx(0.0, abs=1e-12)
    assert projection.explained_variance[0] > 0.0


def test_pca_distances_match_gram_eigendecomposition():
    rng = np.random.default_rng(6)
    mats = [rng.random((5, 4)) for _ in range(4)]
    projection = pca_project(mats)
    flat = np.stack([m.ravel() for m in mats])
    centered = flat - flat.mean(axis=0)
    gram = centered @ centered.T
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1][:2]
    coords = eigvecs[:, order] * np.sqrt(eigvals[order])
    ours = projection.points
    for i in range(4):
        for j in range(4):
            ref = np.linalg.norm(coords[i] - coords[j])
            assert np.linalg.norm(ours[i] - ours[j]) == pytest.approx(ref, abs=1e-9)


def test_pca_explained_variance_ordering():
    rng = np.random.default_rng(7)
    mats = [rng.random((6, 2)) for _ in range(5)]
    projection = pca_project(mats)
    assert projection.explained_variance[0] >= projection.explained_variance[1] >= 0.0


def test_pca_permutation_invariance():
    rng = np.random.default_rng(8)
    mats = [rng.random((3, 3)) for _ in range(4)]
    a = pca_project(mats)
    order = [2, 0, 3, 1]
    b = pca_project([mats[i] for i in order])
    assert np.allclose(b.points, a.points[order], atol=1e-9)


def test_pca_sign_convention_deterministic():
    rng = np.random.default_rng(9)
    mats = [rng.random((4, 4)) for _ in range(4)]
    a = pca_project(mats)
    b = pca_project([m.copy() for m in mats])
    assert np.array_equal(a.points, b.points)


def test_pca_validation():
    with pytest.raises(ValueError, match="two matrices"):
        pca_project([np.zeros((2, 2))])
    with pytest.raises(ValueError, match="share"):
        pca_project([np.zeros((2, 2)), np.zeros((3, 2))])


def test_curve_slope_hand_value():
    assert curve_slope([1, 2, 3], [0.0, 0.1, 0.2]) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        curve_slope([1], [0.0])


def regime_knobs():
    return {
        "standard": (3, 0.90, 0.5),
        "resonant_mid": (6, 0.95, 0.75),
        "resonant_strong": (6, 0.99, 1.0),
    }


def make_points(alpha, beta, gamma, seeds=range(5), noise=None):
    points = []
    for name, (k, mu, rho) in regime_knobs().items():
        a_mu = amplification_factor(mu, k)
        for seed in seeds:
            delta = alpha + beta * a_mu + gamma * rho
            if noise is not None:
                delta += noise.normal(0, 1e-4)
            points.append(ConfigPoint(name, seed, k, mu, rho, "weak", delta))
    return points


def test_dose_response_noiseless_recovery():
    report = dose_response(make_points(1.0, 2.0, 3.0))
    assert report.fit.alpha == pytest.approx(1.0, abs=1e-6)
    assert report.fit.beta == pytest.approx(2.0, abs=1e-6)
    assert report.fit.gamma == pytest.approx(3.0, abs=1e-6)
    assert report.n_points == 15


def test_dose_response_pairs_and_lift():
    # strong and mid share k=6; the generated deltas differ only through
    # a_mu and rho, so the per-seed lift is constant and positive
    report = dose_response(make_points(0.0, 0.01, 0.02))
    expected = 0.01 * (
        amplification_factor(0.99, 6) - amplification_factor(0.95, 6)
    ) + 0.02 * (1.0 - 0.75)
    assert report.pair_seeds == (0, 1, 2, 3, 4)
    assert report.mean_lift == pytest.approx(expected, abs=1e-12)
    assert all(d == pytest.approx(expected, abs=1e-12) for d in report.pair_diffs)
    assert report.paired.p_value == 0.0  # constant positive differences


def test_dose_response_equal_regimes_null():
    points = []
    for name, (k, mu, rho) in regime_knobs().items():
        for seed in range(5):
            points.append(ConfigPoint(name, seed, k, mu, rho, "weak", 0.5 if k == 6 else 0.1))
    report = dose_response(points)
    assert report.mean_lift == 0.0
    assert report.paired.p_value == 1.0


def test_dose_response_filters_non_weak():
    points = make_points(1.0, 2.0, 3.0)
    points.append(ConfigPoint("orthogonal", 0, 6, 0.99, 0.0, "blur", 99.0))
    report = dose_response(points)
    assert report.n_points == 15  # the blur configuration is excluded


def test_preset_amplification_factors():
    assert amplification_factor(0.90, 3) == pytest.approx(2.71, abs=1e-12)
    assert amplification_factor(0.95, 6) == pytest.approx(5.2981621875, abs=1e-10)
    assert amplification_factor(0.99, 6) == pytest.approx(5.8519850599, abs=1e-10)
