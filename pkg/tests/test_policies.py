import numpy as np
import pytest

from deconfound.model import PriorSpec
from deconfound.posterior import GaussianPosterior, NaivePosterior
from deconfound.policies import (
    DTS,
    ContextualTS,
    DeconfoundedUCB,
    NaiveTS,
    Uniform,
    _rare_challenger,
    dts_batch,
    dts_propensities,
    dts_select,
    make_policy,
)


def posterior_with_means(m, s2):
    """Independent one-dimensional arms with population means N(m, s2)."""
    prior = PriorSpec.independent(np.asarray(m, float)[:, None],
                                  np.asarray(s2, float)[:, None, None], 1.0)
    return GaussianPosterior(prior, [1.0]).reset()


def test_propensities_sum_to_one():
    alpha = np.array([0.6, 0.3, 0.1])
    psi = dts_propensities(alpha, 0.4)
    assert psi.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        dts_propensities([1.0, 0.0], 0.5)


def test_selection_frequencies_match_propensities():
    state = posterior_with_means([0.2, 0.0, -0.1], [0.3, 0.5, 0.4])
    rng = np.random.default_rng(5)
    n = 20_000
    arms = np.array([dts_select(state, 0.3, rng).arm for _ in range(n)])
    freq = np.bincount(arms, minlength=3) / n
    psi = dts_propensities(state.optimal_arm_probabilities(), 0.3)
    np.testing.assert_allclose(freq, psi, atol=4 * np.sqrt(0.25 / n))


def test_two_arms_challenger_is_the_other_arm():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((50, 2))
    dec = dts_batch(m, np.ones((50, 2)), 0.0, rng.standard_normal((50, 2)), rng.random(50),
                    rng.random(50), lambda rows, b: None)
    np.testing.assert_array_equal(dec.top_two, 1 - dec.top_one)
    np.testing.assert_array_equal(dec.arm, dec.top_two)
    assert dec.draws.sum() == 0


def test_beta_one_plays_the_leader():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((20, 4))
    first = rng.standard_normal((20, 4))
    dec = dts_batch(m, np.ones((20, 4)), 1.0, first, rng.random(20), rng.random(20),
                    lambda rows, b: rng.standard_normal((rows.size, b, 4)))
    np.testing.assert_array_equal(dec.arm, np.argmax(m + first, axis=1))


def test_exhausted_budget_falls_back_to_weighted_challenger():
    # the leader is essentially certain, so redraws never find anyone else
    m = np.array([[10.0, 0.0, -1.0]])
    s2 = np.full((1, 3), 0.01)
    rng = np.random.default_rng(2)
    dec = dts_batch(m, s2, 0.0, np.zeros((1, 3)), np.array([0.5]), np.array([0.3]),
                    lambda rows, b: rng.standard_normal((rows.size, b, 3)), max_resamples=50)
    assert dec.fallback[0]
    assert dec.top_one[0] == 0 and dec.arm[0] == 1


def plain_loop(m, L, leader, budget, rng):
    while True:
        for pos in range(1, budget + 1):
            nu = m + L @ rng.standard_normal(m.size)
            j = int(np.argmax(nu))
            if j != leader:
                return j, pos
        return -1, budget


def test_rare_challenger_has_the_law_of_the_plain_loop():
    m = np.array([1.0, 0.0, -0.2, 0.3])
    cov = np.array([[0.20, 0.05, 0.00, 0.02],
                    [0.05, 0.30, 0.01, 0.00],
                    [0.00, 0.01, 0.25, 0.03],
                    [0.02, 0.00, 0.03, 0.15]])
    L = np.linalg.cholesky(cov)
    budget, n = 12, 20_000
    r1, r2 = np.random.default_rng(3), np.random.default_rng(4)
    fast = np.array([_rare_challenger(m, cov, L, 0, budget, r1) for _ in range(n)])
    slow = np.array([plain_loop(m, L, 0, budget, r2) for _ in range(n)])
    for col in (0, 1):
        vals = np.union1d(fast[:, col], slow[:, col])
        pf = np.array([(fast[:, col] == v).mean() for v in vals])
        ps = np.array([(slow[:, col] == v).mean() for v in vals])
        assert np.max(np.abs(pf - ps)) < 0.015


def test_uniform_and_ucb():
    state = posterior_with_means([0.0, 0.1, 0.05], [1.0, 0.01, 4.0])
    assert DeconfoundedUCB(z=1.645).select(state).arm == 2
    rng = np.random.default_rng(0)
    arms = [Uniform().select(state, rng).arm for _ in range(3000)]
    np.testing.assert_allclose(np.bincount(arms) / 3000, 1 / 3, atol=0.04)


def test_naive_ts_uses_naive_state():
    naive = NaivePosterior(2, 1.0).reset()
    for _ in range(200):
        naive.update(1, 1.0)
    rng = np.random.default_rng(0)
    arms = [NaiveTS().select(naive, rng).arm for _ in range(200)]
    assert np.mean(arms) > 0.8


def test_contextual_ts_needs_context():
    state = posterior_with_means([0.0, 0.1], [1.0, 1.0])
    with pytest.raises(ValueError):
        ContextualTS().select(state, np.random.default_rng(0))
    assert ContextualTS().select(state, np.random.default_rng(0), context=[1.0]).arm in (0, 1)


def test_plugin_dts_runs_on_a_state():
    state = posterior_with_means([0.5, 0.0, -0.5], [0.1, 0.1, 0.1])
    dec = DTS(beta="plugin").select(state, np.random.default_rng(0))
    assert dec.top_one != dec.top_two


@pytest.mark.parametrize("spec", ["nope", {"name": "dts", "beta": 1.5},
                                  {"name": "dts", "beta": "other"},
                                  {"name": "deconfounded-ucb", "z": -1},
                                  {"name": "uniform", "extra": 1}])
def test_make_policy_rejects_bad_specs(spec):
    with pytest.raises(ValueError):
        make_policy(spec)


def test_make_policy_accepts_names_and_mappings():
    assert make_policy("dts").beta == 0.5
    assert make_policy({"name": "dts", "beta": "plugin"}).plugin
    assert make_policy({"name": "naive-ts", "prior_variance": 2.0}).prior_variance == 2.0


def test_dts_select_rejects_bad_beta():
    state = posterior_with_means([0.0, 0.1], [1.0, 1.0])
    with pytest.raises(ValueError):
        dts_select(state, 0.0, np.random.default_rng(0))


def test_propensities_match_simulated_top_two_draws():
    alpha = np.array([0.8, 0.1, 0.1])
    beta = 0.5
    rng = np.random.default_rng(7)
    n = 1_000_000
    leader = rng.choice(3, size=n, p=alpha)
    # challenger: redraw from alpha until it differs, i.e. alpha restricted to the others
    cond = np.tile(alpha, (3, 1))
    np.fill_diagonal(cond, 0.0)
    cond /= cond.sum(axis=1, keepdims=True)
    u = rng.random(n)
    challenger = (u[:, None] > np.cumsum(cond, axis=1)[leader]).sum(axis=1)
    arm = np.where(rng.random(n) < beta, leader, challenger)
    freq = np.bincount(arm, minlength=3) / n
    psi = dts_propensities(alpha, beta)
    assert np.all(np.abs(freq - psi) <= 3 * np.sqrt(psi * (1 - psi) / n))


def test_propensity_dominates_beta_alpha():
    rng = np.random.default_rng(11)
    for _ in range(100):
        k = int(rng.integers(2, 8))
        alpha = rng.dirichlet(np.ones(k)) * (1 - 1e-9) + 1e-9 / k
        beta = float(rng.uniform(0.05, 1.0))
        psi = dts_propensities(alpha, beta)
        assert psi.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(psi >= beta * alpha - 1e-15)
    np.testing.assert_allclose(dts_propensities([0.5, 0.5], 0.5), [0.5, 0.5])
