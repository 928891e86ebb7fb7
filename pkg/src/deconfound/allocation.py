"""Optimal sampling proportions and the plug-in coin bias.

For population means with unique best arm ``I`` and gaps
``Delta_i = mu_I - mu_i``, the optimal long-run proportions solve the
information-balance system

    Delta_i^2 / (1/p_I + 1/p_i)  equal for all i != I,
    p_I^2 = sum_{i != I} p_i^2.

Writing ``p_i = p_I / (Delta_i^2 y - 1)`` reduces both conditions to one
scalar equation in ``y``,

    sum_{i != I} (Delta_i^2 y - 1)^-2 = 1,

whose left side decreases in ``y`` on ``y > max_i Delta_i^-2``. Then
``p_I = 1 / (1 + sum_i (Delta_i^2 y - 1)^-1)``; used as the DTS coin bias
it is the plug-in ``beta``. The resulting exponent is

    Gamma^-1 = min_{i != I} Delta_i^2 / (2 * scale * (1/p_I + 1/p_i)),

with ``scale = sigma^2 x_pop' E[XX']^-1 x_pop``, the asymptotic variance
factor of a population-mean estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .model import Instance

__all__ = [
    "AllocationSolution",
    "EquilibriumCertificate",
    "solve_beta",
    "solve_beta_batch",
    "solve_p_star",
    "gamma_inverse_at",
    "population_scale",
    "allocation_for",
    "verify_equilibrium",
    "game_utility",
    "TIE_TOL",
]

TIE_TOL = 1e-12
RESIDUAL_TOL = 1e-12


@dataclass
class AllocationSolution:
    """Optimal proportions for one instance.

    Attributes
    ----------
    p_star : ndarray of shape (k,)
    gamma_inverse : float
        Optimal exponent ``Gamma^-1``.
    y_star : float
        Root of the scalar fixed-point equation (``nan`` for k = 2 where
        the closed form is used).
    kkt_residuals : tuple of float
        ``(balance, beta)``: largest relative spread of the balance ratios
        and ``|p_I^2 - sum_i p_i^2|``.
    best_arm_index : int
    scale : float
    """

    p_star: np.ndarray
    gamma_inverse: float
    y_star: float
    kkt_residuals: tuple
    best_arm_index: int
    scale: float = 1.0

    @property
    def beta(self) -> float:
        return float(self.p_star[self.best_arm_index])

    @property
    def gamma(self) -> float:
        """Instance complexity ``Gamma`` (reciprocal of the exponent)."""
        return 1.0 / self.gamma_inverse

    def to_dict(self) -> dict:
        return {
            "p_star": self.p_star.tolist(),
            "gamma_inverse": self.gamma_inverse,
            "gamma": self.gamma,
            "beta": self.beta,
            "y_star": None if np.isnan(self.y_star) else self.y_star,
            "kkt_residuals": {"balance": self.kkt_residuals[0], "beta": self.kkt_residuals[1]},
            "best_arm_index": self.best_arm_index,
            "scale": self.scale,
        }


def _residual(y, gaps2):
    return np.sum((gaps2 * y - 1.0) ** -2.0) - 1.0


def _bracket(gaps2):
    """Bracket for the root.

    At the root every term is at most one, so ``Delta_i^2 y - 1 >= 1``
    for all i, i.e. ``y >= 2 / min Delta^2``; the largest term is at
    least ``1/(k-1)``, so ``y <= (1 + sqrt(k-1)) / min Delta^2``.
    """
    g = gaps2.min()
    n = gaps2.size
    return 2.0 / g, (1.0 + np.sqrt(n)) / g


def _solve_y(gaps2, method="bisection"):
    lo, hi = _bracket(gaps2)
    f_lo, f_hi = _residual(lo, gaps2), _residual(hi, gaps2)
    if abs(f_lo) < RESIDUAL_TOL:
        return lo
    if abs(f_hi) < RESIDUAL_TOL:
        return hi
    if method == "newton":
        y = lo
        for _ in range(100):
            u = gaps2 * y - 1.0
            f = np.sum(u ** -2.0) - 1.0
            if abs(f) < RESIDUAL_TOL:
                return y
            step = f / (-2.0 * np.sum(gaps2 * u ** -3.0))
            y_new = y - step
            if not lo <= y_new <= hi or y_new == y:
                break
            y = y_new
        # fall through to bisection if Newton stalls
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        f = _residual(mid, gaps2)
        if abs(f) < RESIDUAL_TOL or mid in (lo, hi):
            return mid
        if f > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)  # pragma: no cover


def _leader_and_gaps(means):
    means = np.asarray(means, dtype=float).ravel()
    if not np.all(np.isfinite(means)):
        raise ValueError("means must be finite")
    if means.size < 2:
        raise ValueError("need at least two arms")
    top = means.max()
    tied = np.sum(top - means <= TIE_TOL) > 1
    lead = int(np.argmax(means))
    gaps = top - np.delete(means, lead)
    return lead, gaps, tied


def solve_beta(m, previous_beta: float = 0.5, method: str = "bisection") -> float:
    """Plug-in coin bias from posterior means.

    Parameters
    ----------
    m : array_like of shape (k,)
        Posterior means of the population means.
    previous_beta : float, default=0.5
        Returned unchanged when the largest mean is tied (within 1e-12).
    method : {"bisection", "newton"}
        Root finder; Newton falls back to bisection when it stalls.

    Returns
    -------
    float
        ``1 / (1 + sum_i (Delta_i^2 y - 1)^-1)``, which always lies in
        ``[1/(1+sqrt(k-1)), 1/2]``.

    Examples
    --------
    >>> solve_beta([1.0, 0.0])
    0.5
    >>> round(solve_beta([1.0, 0.0, 0.0]), 10)
    0.4142135624
    """
    lead, gaps, tied = _leader_and_gaps(m)
    if tied:
        return float(previous_beta)
    if gaps.size == 1:
        return 0.5
    y = _solve_y(gaps ** 2, method)
    return float(1.0 / (1.0 + np.sum(1.0 / (gaps ** 2 * y - 1.0))))


def solve_beta_batch(m, previous_beta, iterations: int = 60) -> np.ndarray:
    """Vectorised :func:`solve_beta` over rows of ``m`` (Newton from the left).

    The residual is convex and decreasing in ``y``, so Newton's method
    started at the lower end of the bracket increases monotonically to
    the root. Rows whose residual is still above tolerance after the
    iteration budget are finished by scalar bisection.
    """
    m = np.asarray(m, dtype=float)
    n, k = m.shape
    out = np.asarray(previous_beta, dtype=float).copy() * np.ones(n)
    if k < 2:
        return out
    order = np.sort(m, axis=1)
    top = order[:, -1]
    tied = top - order[:, -2] <= TIE_TOL
    if k == 2:
        out[~tied] = 0.5
        return out
    rows = np.flatnonzero(~tied)
    if rows.size == 0:
        return out
    mm = m[rows]
    lead = np.argmax(mm, axis=1)
    gaps2 = (top[rows, None] - mm) ** 2
    gaps2[np.arange(rows.size), lead] = np.inf  # leader's term vanishes
    gmin = np.min(gaps2, axis=1)
    y = 2.0 / gmin
    for _ in range(iterations):
        u = gaps2 * y[:, None] - 1.0
        f = np.sum(u ** -2.0, axis=1) - 1.0
        if np.all(np.abs(f) < RESIDUAL_TOL):
            break
        with np.errstate(invalid="ignore"):
            fp = -2.0 * np.sum(np.where(np.isinf(gaps2), 0.0, gaps2 * u ** -3.0), axis=1)
        y = y - np.where(np.abs(f) < RESIDUAL_TOL, 0.0, f / fp)
    u = gaps2 * y[:, None] - 1.0
    f = np.sum(u ** -2.0, axis=1) - 1.0
    beta = 1.0 / (1.0 + np.sum(1.0 / u, axis=1))
    bad = ~(np.abs(f) < RESIDUAL_TOL)
    for r in np.flatnonzero(bad):
        beta[r] = solve_beta(mm[r], 0.5)
    out[rows] = beta
    return out


def solve_p_star(population_means, scale: float = 1.0, method: str = "bisection") -> AllocationSolution:
    """Optimal proportions and exponent for known population means.

    Parameters
    ----------
    population_means : array_like of shape (k,)
        Must have distinct entries.
    scale : float, default=1.0
        ``sigma^2 x_pop' E[XX']^-1 x_pop``.
    method : {"bisection", "newton"}

    Raises
    ------
    ValueError
        "instance outside Theta" when two population means coincide.
    """
    mu = np.asarray(population_means, dtype=float).ravel()
    if scale <= 0 or not np.isfinite(scale):
        raise ValueError("scale must be positive and finite")
    srt = np.sort(mu)
    if mu.size < 2 or np.any(np.diff(srt) <= TIE_TOL):
        raise ValueError("instance outside Theta: population means must be distinct")
    lead, gaps, _ = _leader_and_gaps(mu)
    others = np.delete(np.arange(mu.size), lead)
    if gaps.size == 1:
        y = np.nan
        u = np.ones(1)
    else:
        y = _solve_y(gaps ** 2, method)
        u = gaps ** 2 * y - 1.0
    p_lead = 1.0 / (1.0 + np.sum(1.0 / u))
    p = np.empty(mu.size)
    p[lead] = p_lead
    p[others] = p_lead / u
    total = p.sum()
    p /= total
    ratios = gaps ** 2 / (1.0 / p[lead] + 1.0 / p[others])
    gamma_inv = float(ratios.min() / (2.0 * scale))
    balance = float((ratios.max() - ratios.min()) / ratios.max())
    beta_res = float(abs(p[lead] ** 2 - np.sum(p[others] ** 2)))
    return AllocationSolution(p, gamma_inv, float(y), (balance, beta_res), lead, float(scale))


def gamma_inverse_at(p, population_means, scale: float = 1.0) -> float:
    """Posterior concentration exponent under long-run proportions ``p``.

    ``min_{j != I} (mu_I - mu_j)^2 / (2 scale (1/p_I + 1/p_j))``.

    Raises
    ------
    ValueError
        If some ``p_i <= 0``.
    """
    p = np.asarray(p, dtype=float).ravel()
    mu = np.asarray(population_means, dtype=float).ravel()
    if np.any(p <= 0):
        raise ValueError("proportions must be strictly positive")
    lead = int(np.argmax(mu))
    others = np.delete(np.arange(mu.size), lead)
    gaps2 = (mu[lead] - mu[others]) ** 2
    return float(np.min(gaps2 / (2.0 * scale * (1.0 / p[lead] + 1.0 / p[others]))))


def population_scale(x_pop, second_moment, sigma2: float) -> float:
    """``sigma^2 x_pop' Lambda^-1 x_pop`` for ``Lambda = E[XX']``.

    Raises
    ------
    ValueError
        If ``Lambda`` is singular.
    """
    lam = np.asarray(second_moment, dtype=float)
    w = np.linalg.eigvalsh(lam)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise ValueError("second moment matrix E[XX'] is singular")
    x = np.asarray(x_pop, dtype=float)
    return float(sigma2 * x @ np.linalg.solve(lam, x))


def allocation_for(instance: Instance, second_moment, method: str = "bisection") -> AllocationSolution:
    """Solve the allocation problem for an instance with known truth."""
    scale = population_scale(instance.x_pop, second_moment, instance.sigma2)
    return solve_p_star(instance.population_means(), scale, method)


# ---------------------------------------------------------------------------
# equilibrium certificate


@dataclass
class EquilibriumCertificate:
    """Saddle point of the experimenter-versus-nature game.

    The experimenter allocates information matrices ``M_i = p_i Lambda``;
    nature answers with the closest alternative parameter under which some
    arm ties the best arm.

    Attributes
    ----------
    nature_alternatives : list of ndarray
        One stacked alternative ``theta_hat_i`` per suboptimal arm.
    alternative_arms : list of int
        The suboptimal arm each alternative belongs to.
    nature_weights : ndarray
        Mixed strategy ``q*`` making the experimenter indifferent among
        all feasible allocations.
    reference_weights : ndarray
        ``(p_i / p_I)^2``; coincides with ``nature_weights`` when all
        suboptimal gaps are equal.
    M_star : ndarray of shape (k, d, d)
    eta : ndarray
        Multipliers of the tie constraints.
    utilities : ndarray
        Game utility of each alternative against ``M_star``.
    tie_residuals : ndarray
        Population-mean gap between arm i and the best arm under
        ``theta_hat_i``.
    value_gap : float
        ``max_i |utility_i - Gamma^-1|``.
    """

    nature_alternatives: List[np.ndarray]
    alternative_arms: List[int]
    nature_weights: np.ndarray
    reference_weights: np.ndarray
    M_star: np.ndarray
    eta: np.ndarray
    utilities: np.ndarray
    tie_residuals: np.ndarray
    value_gap: float
    gamma_inverse: float
    theta: np.ndarray = field(repr=False, default=None)
    sigma2: float = 1.0

    def utility(self, M, weights=None) -> float:
        """Expected utility of allocation ``M`` against nature's mixture."""
        q = self.nature_weights if weights is None else np.asarray(weights)
        return float(sum(qi * game_utility(self.theta, alt, M, self.sigma2)
                         for qi, alt in zip(q, self.nature_alternatives)))

    def to_dict(self) -> dict:
        return {
            "alternative_arms": self.alternative_arms,
            "nature_alternatives": [a.tolist() for a in self.nature_alternatives],
            "nature_weights": self.nature_weights.tolist(),
            "reference_weights": self.reference_weights.tolist(),
            "eta": self.eta.tolist(),
            "utilities": self.utilities.tolist(),
            "tie_residuals": self.tie_residuals.tolist(),
            "value_gap": self.value_gap,
            "gamma_inverse": self.gamma_inverse,
        }


def game_utility(theta, theta_alt, M, sigma2: float) -> float:
    """``(1/(2 sigma^2)) sum_i (theta_i - alt_i)' M_i (theta_i - alt_i)``."""
    M = np.asarray(M, dtype=float)
    k, d, _ = M.shape
    diff = (np.asarray(theta) - np.asarray(theta_alt)).reshape(k, d)
    return float(np.einsum("id,ide,ie->", diff, M, diff) / (2.0 * sigma2))


def verify_equilibrium(instance: Instance, solution: AllocationSolution, second_moment) -> EquilibriumCertificate:
    """Build nature's alternatives and check the saddle-point structure.

    For each suboptimal arm ``i`` the alternative shifts arm ``i`` up by
    ``(eta_i / p_i) Lambda^-1 x_pop`` and the best arm down by
    ``(eta_i / p_I) Lambda^-1 x_pop``, with
    ``eta_i = Delta_i / (||x_pop||^2_{Lambda^-1} (1/p_i + 1/p_I))``, which
    makes the two arms tie exactly. Each alternative's utility against
    ``M*_i = p_i Lambda`` equals ``Gamma^-1``. Nature's mixture
    ``q_i ∝ p_i^2 Delta_i^2`` makes every feasible allocation equally
    good for the experimenter.

    Parameters
    ----------
    instance : Instance
        Must carry the truth and have ``sigma^2 > 0``.
    solution : AllocationSolution
        Output of :func:`allocation_for` with the same ``second_moment``.
    second_moment : ndarray of shape (d, d)
        ``Lambda = E[XX']`` of the sampling context distribution.

    Raises
    ------
    ValueError
        If ``Lambda`` is singular or the noise variance is zero.
    """
    if instance.theta is None:
        raise ValueError("instance has no ground truth")
    sigma2 = instance.sigma2
    if sigma2 <= 0:
        raise ValueError("the game needs positive noise variance")
    lam = np.asarray(second_moment, dtype=float)
    population_scale(instance.x_pop, lam, sigma2)  # raises if singular
    k, d = instance.k, instance.d
    theta = instance.theta
    x = instance.x_pop
    direction = np.linalg.solve(lam, x)  # Lambda^-1 x_pop
    b = float(x @ direction)
    p = solution.p_star
    lead = solution.best_arm_index
    mu = instance.population_means()
    alts, arms, etas, utils, ties = [], [], [], [], []
    M_star = p[:, None, None] * lam[None]
    for i in range(k):
        if i == lead:
            continue
        gap = mu[lead] - mu[i]
        eta = gap / (b * (1.0 / p[i] + 1.0 / p[lead]))
        alt = theta.reshape(k, d).copy()
        alt[i] += (eta / p[i]) * direction
        alt[lead] -= (eta / p[lead]) * direction
        alt = alt.ravel()
        alts.append(alt)
        arms.append(i)
        etas.append(eta)
        ties.append(float((alt.reshape(k, d)[i] - alt.reshape(k, d)[lead]) @ x))
        utils.append(game_utility(theta, alt, M_star, sigma2))
    arms_arr = np.array(arms)
    w = p[arms_arr] ** 2 * (mu[lead] - mu[arms_arr]) ** 2
    q = w / w.sum()
    q_ref = (p[arms_arr] / p[lead]) ** 2
    utils = np.array(utils)
    gap = float(np.max(np.abs(utils - solution.gamma_inverse)))
    return EquilibriumCertificate(alts, arms, q, q_ref, M_star, np.array(etas), utils,
                                  np.array(ties), gap, solution.gamma_inverse, theta, sigma2)
