import numpy as np
import pytest

from deconfound.model import PriorSpec
from deconfound.posterior import DelayBuffer, GaussianPosterior
from deconfound.stopping import (
    StoppingConfig,
    bayes_select,
    combined_cost,
    should_stop,
    stop_statistic,
    threshold,
)


def state(m, s2):
    prior = PriorSpec.independent(np.asarray(m, float)[:, None],
                                  np.asarray(s2, float)[:, None, None], 1.0)
    return GaussianPosterior(prior, [1.0]).reset()


def test_threshold_formula():
    g = np.sqrt(2 * np.log(10**3 / 0.01))
    assert threshold(10, 0.01) == pytest.approx(g + np.sqrt(g))
    np.testing.assert_allclose(threshold(np.array([1, 10]), 0.01),
                               [threshold(1, 0.01), threshold(10, 0.01)])
    with pytest.raises(ValueError):
        threshold(0, 0.1)


def test_threshold_increases_in_t_and_decreases_in_delta():
    t = np.arange(1, 1000)
    assert np.all(np.diff(threshold(t, 0.05)) > 0)
    assert threshold(50, 1e-4) > threshold(50, 1e-2)


def test_stop_statistic_is_min_leader_z():
    zmin, lead = stop_statistic(np.array([1.0, 0.0, 0.5]), np.array([0.1, 0.1, 0.15]))
    assert lead == 0
    assert zmin == pytest.approx(0.5 / np.sqrt(0.25))


def test_should_stop_and_cap():
    cfg = StoppingConfig(0.05, max_horizon=100)
    assert should_stop(state([0.0, 0.1], [1.0, 1.0]), 5, cfg) == (False, None)
    assert should_stop(state([10.0, 0.0], [1e-3, 1e-3]), 5, cfg) == (True, "threshold")
    assert should_stop(state([0.0, 0.1], [1.0, 1.0]), 100, cfg) == (True, "cap")


def test_config_validation():
    with pytest.raises(ValueError):
        StoppingConfig(1.0)
    with pytest.raises(ValueError):
        StoppingConfig(0.1, max_horizon=0)


def test_bayes_select_uses_pending_rewards_without_mutating():
    s = state([0.0, 0.1], [1.0, 1.0])
    buf = DelayBuffer(5)
    for t in range(1, 4):
        buf.record(t, 0, [1.0], 3.0)
    assert bayes_select(s) == 1
    assert bayes_select(s, buf) == 0
    assert s.n_obs_.sum() == 0
    assert len(buf) == 3


def test_combined_cost():
    assert combined_cost(0.01, 10, 0.5) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        combined_cost(0.0, 10, 0.1)
