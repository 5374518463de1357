import numpy as np
import pytest
from scipy import stats

from psonet.data import compute_sampling_weights


def _totals():
    return np.array([3.0] * 90 + [20.0] * 10)


def test_inverse_frequency():
    w = compute_sampling_weights(_totals())
    assert w.warning is None
    assert w.weights[-1] / w.weights[0] == pytest.approx(9.0)
    assert w.high_bin_probability(_totals()) == pytest.approx(0.5)


def test_threshold_is_exclusive():
    w = compute_sampling_weights(np.array([10.0, 10.0, 10.5]))
    assert w.weights.tolist() == [1.0, 1.0, 2.0]


def test_degenerate_bin_falls_back():
    w = compute_sampling_weights(np.full(20, 4.0))
    assert w.warning and np.all(w.weights == 1.0)


def test_empirical_frequency_and_chi_square():
    totals = _totals()
    w = compute_sampling_weights(totals)
    draws = w.draw(10_000, np.random.default_rng(123))
    high = totals[draws] > 10
    assert abs(high.mean() - 0.5) <= 0.02
    observed = np.bincount(draws, minlength=len(totals))
    assert stats.chisquare(observed, 10_000 * w.probabilities).pvalue > 0.01


def test_manifest_input(tiny_dataset):
    _, m = tiny_dataset
    w = compute_sampling_weights(m)
    assert w.keys == m.visits() and len(w.weights) == len(m.visits())


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        compute_sampling_weights([])
    with pytest.raises(ValueError):
        compute_sampling_weights([1.0, np.nan])
