import math

import numpy as np
import pytest

from backflow.divergences import KINDS, div_avg, div_row
from backflow.model import ProbePredictions


def random_prob(rng, n):
    p = rng.random(n) + 1e-9
    return p / p.sum()


def test_identity_of_indiscernibles():
    p = [0.2, 0.3, 0.5]
    for kind in KINDS:
        assert div_row(kind, p, p) == 0.0


def test_disjoint_support_values():
    assert div_row("tv", [1, 0], [0, 1]) == pytest.approx(1.0, abs=1e-15)
    assert div_row("js", [1, 0], [0, 1]) == pytest.approx(1.0, abs=1e-15)
    assert div_row("hellinger", [1, 0], [0, 1]) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)


def test_tv_direct_evaluation():
    assert div_row("tv", [0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.25, abs=1e-15)


def test_symmetry_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        p, q = random_prob(rng, n), random_prob(rng, n)
        for kind in KINDS:
            assert div_row(kind, p, q) == div_row(kind, q, p)


def test_range_bounds():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 10))
        p, q = random_prob(rng, n), random_prob(rng, n)
        for kind in KINDS:
            v = div_row(kind, p, q)
            assert 0.0 <= v <= 1.0
        assert div_row("hellinger", p, q) <= math.sqrt(2) / 2 + 1e-12


def test_js_finite_with_zeros():
    v = div_row("js", [0.5, 0.5, 0.0], [0.0, 0.5, 0.5])
    assert np.isfinite(v) and 0.0 < v < 1.0


def test_data_processing_inequality():
    rng = np.random.default_rng(2)
    for _ in range(150):
        n_in = int(rng.integers(2, 8))
        n_out = int(rng.integers(2, 8))
        p, q = random_prob(rng, n_in), random_prob(rng, n_in)
        channel = rng.random((n_out, n_in)) + 1e-6
        channel /= channel.sum(axis=0, keepdims=True)
        for kind in KINDS:
            assert div_row(kind, channel @ p, channel @ q) <= div_row(kind, p, q) + 1e-12


def test_zero_iff_equal():
    rng = np.random.default_rng(3)
    p = random_prob(rng, 5)
    q = random_prob(rng, 5)
    for kind in KINDS:
        assert div_row(kind, p, q) > 0.0


def test_renormalization_tolerance():
    p = np.array([0.5, 0.5]) * (1 + 5e-7)
    assert div_row("tv", p, [0.5, 0.5]) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError, match="not normalized"):
        div_row("tv", [0.6, 0.6], [0.5, 0.5])


def test_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        div_row("tv", [1, 0], [1, 0, 0])


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown divergence"):
        div_row("kl", [1, 0], [0, 1])


def test_div_avg_identity_and_mean():
    p = np.array([[1.0, 0.0], [0.5, 0.5]])
    q = np.array([[0.0, 1.0], [0.5, 0.5]])
    assert div_avg("tv", p, p) == 0.0
    # row divergences are 1 and 0, so the mean is 0.5
    assert div_avg("tv", p, q) == pytest.approx(0.5, abs=1e-15)


def test_div_avg_matches_row_loop():
    rng = np.random.default_rng(4)
    p = np.stack([random_prob(rng, 6) for _ in range(40)])
    q = np.stack([random_prob(rng, 6) for _ in range(40)])
    for kind in KINDS:
        naive = sum(div_row(kind, p[i], q[i]) for i in range(len(p))) / len(p)
        assert div_avg(kind, p, q) == pytest.approx(naive, abs=1e-12)


def test_div_avg_probe_mismatch():
    p = ProbePredictions(np.array([[0.5, 0.5]]), probe_id="probe-a")
    q = ProbePredictions(np.array([[0.5, 0.5]]), probe_id="probe-b")
    with pytest.raises(ValueError, match="probe mismatch"):
        div_avg("tv", p, q)
    assert div_avg("tv", p, ProbePredictions(p.probs, "probe-a")) == 0.0


def test_div_avg_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        div_avg("tv", np.eye(2), np.eye(3))
