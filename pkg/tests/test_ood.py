from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calibrate_lab import ood
from oracles import tv_loop


def hist(conf, bins=20):
    return ood.confidence_histogram(conf, bins)


def test_all_ones_fill_last_bin():
    h = hist([1.0] * 7, 10)
    assert h.masses[-1] == 1.0 and h.masses[:-1].sum() == 0.0
    assert h.count == 7


def test_two_bin_example():
    np.testing.assert_array_equal(hist([0.25, 0.75], 2).masses, [0.5, 0.5])


def test_histogram_right_closed():
    h = hist([0.5], 2)
    np.testing.assert_array_equal(h.masses, [1.0, 0.0])


def test_histogram_errors():
    with pytest.raises(ood.OodError):
        hist([])
    with pytest.raises(ood.OodError):
        hist([1.2])


@given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=200), st.integers(1, 60))
def test_masses_are_normalized(conf, bins):
    h = hist(conf, bins)
    assert np.all(h.masses >= 0)
    assert abs(h.masses.sum() - 1.0) < 1e-9
    assert h.n_bins == bins


def test_tv_hand_cases():
    a, b = hist([0.25, 0.75], 2), hist([0.25, 0.75, 0.75, 0.75], 2)
    assert ood.tv_distance(a, b) == pytest.approx(0.25, abs=1e-15)
    assert ood.tv_distance(a, a) == 0.0
    assert ood.tv_distance(hist([0.1] * 3), hist([0.9] * 5)) == 1.0


def test_tv_requires_shared_edges():
    with pytest.raises(ood.OodError):
        ood.tv_distance(hist([0.5], 10), hist([0.5], 20))


@pytest.mark.parametrize("tv, p", [(0.0, 0.5), (0.6, 0.8), (1.0, 1.0)])
def test_detection_probability(tv, p):
    assert ood.ood_detection_probability(tv) == pytest.approx(p, abs=1e-15)


@pytest.mark.parametrize("tv", [-0.01, 1.01, math.nan])
def test_detection_probability_out_of_range(tv):
    with pytest.raises(ood.OodError):
        ood.ood_detection_probability(tv)


conf_lists = st.lists(st.floats(0.001, 1.0), min_size=1, max_size=60)


@given(conf_lists, conf_lists, conf_lists)
def test_tv_is_a_metric(x, y, z):
    hx, hy, hz = hist(x, 12), hist(y, 12), hist(z, 12)
    dxy = ood.tv_distance(hx, hy)
    assert dxy == ood.tv_distance(hy, hx)
    assert 0.0 <= dxy <= 1.0
    assert ood.tv_distance(hx, hx) == 0.0
    assert (dxy == 0.0) == bool(np.array_equal(hx.masses, hy.masses))
    assert dxy <= ood.tv_distance(hx, hz) + ood.tv_distance(hz, hy) + 1e-12
    assert dxy == pytest.approx(tv_loop(hx.masses, hy.masses), abs=1e-15)


def _beta_pdf(x, a, b):
    log_norm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    return np.exp(log_norm + (a - 1) * np.log(x) + (b - 1) * np.log1p(-x))


@pytest.mark.parametrize("p, q", [((2, 5), (5, 2)), ((2, 2), (3, 2)), ((8, 2), (12, 2))])
def test_histogram_tv_tracks_analytic_beta_tv(p, q):
    grid = np.linspace(0.0, 1.0, 200_001)[1:-1]
    analytic = 0.5 * np.trapezoid(np.abs(_beta_pdf(grid, *p) - _beta_pdf(grid, *q)), grid)
    rng = np.random.default_rng(0)
    est = ood.tv_distance(hist(rng.beta(*p, 100_000), 50), hist(rng.beta(*q, 100_000), 50))
    assert abs(est - analytic) < 0.02


def test_histogram_csv():
    text = ood.histogram_csv(hist([0.3], 4), hist([0.9], 4))
    lines = text.strip().splitlines()
    assert lines[0] == "bin_lo,bin_hi,mass_id,mass_ood"
    assert lines[2] == "0.25,0.5,1.0,0.0"
    assert lines[4] == "0.75,1.0,0.0,1.0"


def test_selective_tv_with_everything_accepted_is_plain_tv():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0.5, 1, 300), rng.uniform(0.3, 1, 200)
    got = ood.selective_tv(a, np.ones(300, bool), b, np.ones(200, bool), 20)
    assert got == pytest.approx(ood.tv_distance(hist(a), hist(b)), abs=1e-15)


def test_selective_tv_counts_rejection_as_an_outcome():
    # identical accepted confidences, but half the OOD set is rejected
    got = ood.selective_tv([0.9, 0.9], [True, True], [0.9, 0.9], [True, False], 10)
    assert got == pytest.approx(0.5, abs=1e-15)
    assert ood.selective_tv([0.9], [False], [0.2], [False], 10) == 0.0
