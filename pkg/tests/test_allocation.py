import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deconfound.allocation import (
    gamma_inverse_at,
    population_scale,
    solve_beta,
    solve_beta_batch,
    solve_p_star,
    verify_equilibrium,
    allocation_for,
)
from deconfound.environments import make_reference_instance

from oracles import exponent, grid_p_star, polish


def test_beta_closed_forms():
    assert solve_beta([0.3, -1.0]) == 0.5
    assert solve_beta([1.0, 0.0, 0.0]) == pytest.approx(1 / (1 + np.sqrt(2)), abs=1e-12)
    # tied leaders keep the previous value
    assert solve_beta([1.0, 1.0, 0.0], previous_beta=0.37) == 0.37


@pytest.mark.parametrize("method", ["bisection", "newton"])
def test_methods_agree(method):
    m = [0.9, 0.1, -0.3, 0.5]
    assert solve_beta(m, method=method) == pytest.approx(solve_beta(m), abs=1e-10)


means = st.integers(3, 10).flatmap(
    lambda k: st.lists(st.floats(-5, 5, allow_nan=False), min_size=k, max_size=k, unique=True))


@settings(max_examples=200, deadline=None)
@given(means)
def test_beta_bounds(m):
    m = np.array(m)
    srt = np.sort(m)
    if srt[-1] - srt[-2] < 1e-6:
        return
    k = m.size
    b = solve_beta(m)
    assert 1 / (1 + np.sqrt(k - 1)) - 1e-12 <= b <= 0.5 + 1e-12


def test_batch_solver_matches_scalar():
    rng = np.random.default_rng(8)
    m = rng.standard_normal((300, 5))
    m[0] = [1.0, 1.0, 0.0, 0.0, 0.0]  # tie keeps previous
    out = solve_beta_batch(m, 0.42)
    ref = np.array([solve_beta(row, 0.42) for row in m])
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_p_star_is_balanced_and_beats_grid():
    mu = np.array([1.0, 0.6, 0.1])
    sol = solve_p_star(mu)
    assert sol.p_star.sum() == pytest.approx(1.0)
    assert max(sol.kkt_residuals) < 1e-8
    assert sol.gamma_inverse == pytest.approx(gamma_inverse_at(sol.p_star, mu), rel=1e-12)
    p_grid, v_grid = grid_p_star(mu, resolution=1e-2)
    assert sol.gamma_inverse >= v_grid
    p_pol, v_pol = polish(p_grid, mu)
    np.testing.assert_allclose(sol.p_star, p_pol, atol=1e-4)
    assert sol.beta == pytest.approx(sol.p_star[0])


def test_p_star_two_arms_is_even_split():
    sol = solve_p_star([0.0, 2.0], scale=2.0)
    np.testing.assert_allclose(sol.p_star, [0.5, 0.5])
    assert sol.gamma_inverse == pytest.approx(4.0 / (2 * 2.0 * 4.0))


def test_p_star_rejects_ties():
    with pytest.raises(ValueError, match="outside Theta"):
        solve_p_star([1.0, 1.0, 0.0])


def test_population_scale_singular():
    with pytest.raises(ValueError):
        population_scale([1.0, 0.0], np.zeros((2, 2)), 1.0)


def test_reference_instance_solution():
    env = make_reference_instance()
    sol = allocation_for(env.instance, env.second_moment())
    np.testing.assert_allclose(sol.p_star, [0.46907, 0.46431, 0.06662], atol=5e-5)
    assert sol.gamma_inverse == pytest.approx(0.0245006, rel=1e-5)


def test_equilibrium_certificate_on_reference():
    env = make_reference_instance()
    lam = env.second_moment()
    sol = allocation_for(env.instance, lam)
    cert = verify_equilibrium(env.instance, sol, lam)
    assert cert.value_gap < 1e-10
    assert np.all(np.abs(cert.tie_residuals) < 1e-10)
    assert cert.nature_weights.sum() == pytest.approx(1.0)
    # nature's mixture leaves the experimenter indifferent across allocations
    rng = np.random.default_rng(0)
    u0 = cert.utility(cert.M_star)
    for _ in range(5):
        q = rng.dirichlet(np.ones(env.instance.k))
        assert cert.utility(q[:, None, None] * lam) == pytest.approx(u0, rel=1e-9)


def test_exponent_helper_agrees_with_library():
    mu = np.array([0.2, 0.9, 0.5])
    p = np.array([0.3, 0.5, 0.2])
    assert exponent(p, mu)[0] == pytest.approx(gamma_inverse_at(p, mu))
