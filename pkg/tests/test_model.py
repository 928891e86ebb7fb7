import numpy as np
import pytest

from deconfound.model import (
    ConfigError,
    argmax_lowest,
    best_arm,
    build_instance,
    check_positive_definite,
    population_means,
    simple_regret,
)


def test_population_means_use_weighted_context(small_instance):
    # x_pop = (0.5, 0.3, 0.2)
    np.testing.assert_allclose(small_instance.x_pop, [0.5, 0.3, 0.2])
    mu = small_instance.population_means()
    np.testing.assert_allclose(mu, [0.5 - 0.2, 0.1 + 0.09 + 0.02])
    assert small_instance.best_arm() == 0
    assert small_instance.simple_regret(1) == pytest.approx(0.3 - 0.21)
    assert small_instance.simple_regret(0) == 0.0


def test_free_functions_match_instance(small_instance):
    theta = small_instance.theta
    pop = small_instance.population
    np.testing.assert_allclose(population_means(theta, pop), small_instance.population_means())
    assert best_arm(theta, pop) == 0
    with pytest.raises(IndexError):
        simple_regret(theta, 5, pop)


def test_argmax_ties_go_to_lowest_index():
    assert argmax_lowest([1.0, 3.0, 3.0]) == 1
    np.testing.assert_array_equal(argmax_lowest(np.array([[2.0, 2.0], [0.0, 1.0]]), axis=1), [0, 1])


def test_x_pop_can_be_given_directly():
    inst = build_instance({"k": 3, "d": 2, "population": {"x_pop": [1.0, 0.5]},
                           "truth": {"seed": 4}})
    assert inst.k == 3 and inst.d == 2
    assert inst.theta.shape == (6,)
    # the seed makes the truth reproducible
    again = build_instance({"k": 3, "d": 2, "population": {"x_pop": [1.0, 0.5]},
                            "truth": {"seed": 4}})
    np.testing.assert_array_equal(inst.theta, again.theta)


def test_joint_prior_round_trip():
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    inst = build_instance({"k": 2, "d": 1, "population": {"x_pop": [1.0]},
                           "prior": {"mode": "joint", "mean": 0.0, "covariance": cov.tolist()}})
    assert inst.prior.has_cross_arm_covariance
    np.testing.assert_allclose(inst.prior.covariance, cov)


@pytest.mark.parametrize("config, field", [
    ({"d": 2}, "k"),
    ({"k": 2}, "d"),
    ({"k": 2, "d": 2}, "population"),
    ({"k": 2, "contexts": [[1.0, 0.0]], "population": {"weights": [1.0, 2.0]}},
     "population.weights"),
    ({"k": 2, "d": 1, "population": {"x_pop": [1.0]}, "sigma2": -1.0}, "sigma2"),
    ({"k": 2, "d": 1, "population": {"x_pop": [1.0]}, "delay": 0}, "delay"),
    ({"k": 2, "d": 1, "population": {"x_pop": [1.0]},
      "prior": {"mode": "joint", "covariance": [[1.0, 2.0], [2.0, 1.0]]}}, "prior.covariance"),
    ({"k": 2, "d": 1, "population": {"x_pop": [1.0]}, "prior": {"mode": "bogus"}},
     "prior.mode"),
    ({"k": 2, "d": 1, "population": {"x_pop": [1.0]}, "truth": {"theta": [1.0]}},
     "truth.theta"),
])
def test_config_errors_name_the_field(config, field):
    with pytest.raises(ConfigError) as info:
        build_instance(config)
    assert info.value.field.startswith(field)


def test_check_positive_definite_rejects_indefinite():
    check_positive_definite(np.eye(2))
    with pytest.raises(ConfigError):
        check_positive_definite(np.array([[1.0, 0.0], [0.0, -1e-3]]))


def test_zero_noise_needs_one_hot_contexts():
    with pytest.raises(ConfigError):
        build_instance({"k": 2, "contexts": [[1.0, 1.0], [0.0, 1.0]], "sigma2": 0.0,
                        "truth": {"seed": 0}})
    inst = build_instance({"k": 2, "contexts": np.eye(2).tolist(), "sigma2": 0.0,
                           "truth": {"seed": 0}})
    assert inst.sigma2 == 0.0
