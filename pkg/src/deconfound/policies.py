"""Arm-selection rules.

Every rule has two entry points: a function acting on a single
posterior state (``dts_select`` and friends) and a vectorised kernel
acting on a batch of replications at once (``*_batch``), which the
simulation engine uses. The single-state functions are thin wrappers
around the kernels, so both paths share one implementation.

Deconfounded Thompson sampling (DTS) is top-two sampling on the
population means: draw the population means from the posterior and take
the argmax as leader, keep redrawing until a different arm comes out on
top (the challenger), then play the leader with probability ``beta``.
DTS never looks at the current context.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtri_exp
from sklearn.base import BaseEstimator

from .model import argmax_lowest
from .posterior import GaussianPosterior, NaivePosterior, _psd_factor, z_matrix

__all__ = [
    "PolicyDecision",
    "dts_select",
    "dts_propensities",
    "uniform_select",
    "context_unaware_ts_select",
    "deconfounded_ucb_select",
    "contextual_ts_select",
    "dts_batch",
    "DTS",
    "Uniform",
    "NaiveTS",
    "DeconfoundedUCB",
    "ContextualTS",
    "make_policy",
    "POLICY_NAMES",
]

DEFAULT_MAX_RESAMPLES = 10_000
DEFAULT_UCB_Z = 1.645


@dataclass
class PolicyDecision:
    """Outcome of one selection.

    Attributes
    ----------
    arm : int
        Arm played.
    top_one, top_two : int
        Leader and challenger (both equal ``arm`` for single-draw rules).
    coin : int or None
        1 when DTS played its leader.
    propensities : ndarray or None
        Selection probabilities of every arm, when known.
    resample_draws_used : int
        Posterior redraws spent looking for a challenger.
    fallback : bool
        True when the redraw budget ran out and the challenger came from
        the ``Phi(-Z)`` weights.
    """

    arm: int
    top_one: int
    top_two: int
    coin: Optional[int] = None
    propensities: Optional[np.ndarray] = None
    resample_draws_used: int = 0
    fallback: bool = False


@dataclass
class BatchDecision:
    """Vectorised counterpart of :class:`PolicyDecision` (one row per replication)."""

    arm: np.ndarray
    top_one: np.ndarray
    top_two: np.ndarray
    coin: Optional[np.ndarray] = None
    draws: Optional[np.ndarray] = None
    fallback: Optional[np.ndarray] = None

    def row(self, r: int = 0) -> PolicyDecision:
        return PolicyDecision(
            arm=int(self.arm[r]),
            top_one=int(self.top_one[r]),
            top_two=int(self.top_two[r]),
            coin=None if self.coin is None else int(self.coin[r]),
            resample_draws_used=0 if self.draws is None else int(self.draws[r]),
            fallback=False if self.fallback is None else bool(self.fallback[r]),
        )


# ---------------------------------------------------------------------------
# DTS


def _challenger_fallback(z_leader, leader, u):
    """Sample challengers with weights ``Phi(-Z_{leader,j})`` over ``j != leader``.

    Parameters
    ----------
    z_leader : ndarray of shape (n, k)
        z-scores of the leader against every arm.
    leader : ndarray of shape (n,)
    u : ndarray of shape (n,)
        Uniform variates.
    """
    n, k = z_leader.shape
    logw = log_ndtr(-z_leader)
    logw[np.arange(n), leader] = -np.inf
    total = logsumexp(logw, axis=1, keepdims=True)
    dead = ~np.isfinite(total[:, 0])
    with np.errstate(invalid="ignore"):
        w = np.exp(logw - total)
    if np.any(dead):
        # every challenger weight underflows or the leader is a certain
        # winner: choose uniformly among the other arms
        w[dead] = 1.0
        w[dead, leader[dead]] = 0.0
        w[dead] /= k - 1
    cdf = np.cumsum(w, axis=1)
    cdf[:, -1] = np.inf
    out = np.argmax(cdf > u[:, None], axis=1)
    # guard against rounding leaving the leader selected
    bad = out == leader
    if np.any(bad):
        alt = np.where(w[bad] > 0, np.arange(k), k)
        out[bad] = np.min(alt, axis=1)
    return out


def _rare_setup(m, cov, leader):
    """Per-row quantities for :func:`_rare_challenger` (vectorised over rows).

    Returns the means ``mu_d`` and variances ``c_var`` of
    ``nu_j - nu_leader`` and the log-probabilities ``log_u`` of
    ``nu_j > nu_leader``, each of shape (n, k).
    """
    n, k = m.shape
    rows = np.arange(n)
    dq = np.einsum("rii->ri", cov)
    c_var = dq[rows, leader][:, None] + dq - 2.0 * cov[rows, leader]
    mu_d = m - m[rows, leader][:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(c_var > 0, -mu_d / np.sqrt(np.maximum(c_var, 0.0)),
                     np.where(mu_d > 0, -np.inf, np.inf))
    a[rows, leader] = np.inf
    return mu_d, c_var, log_ndtr(-a)


def _rare_challenger(m, cov, factor, leader: int, budget: int, rng: np.random.Generator,
                     setup=None):
    """Outcome of the redraw loop when a different winner is rare.

    Returns ``(challenger, draws)`` with the same joint law as redrawing
    ``nu ~ N(m, cov)`` until ``argmax nu != leader`` (``challenger = -1``
    and ``draws = budget`` when the budget runs out first).

    Let ``A_j = {nu_j > nu_leader}`` with ``u_j = P(A_j)`` and
    ``U = sum_j u_j < 1``. Each redraw is a candidate with probability
    ``U``; a candidate picks ``j`` with probability ``u_j / U``, samples
    ``nu`` conditionally on ``A_j`` and is accepted with probability
    ``1 / #{i : A_i holds}``. An accepted candidate is a draw from ``nu``
    restricted to the union of the ``A_j`` and each redraw is accepted
    with probability ``P(union A_j)``, so the index of the first
    acceptance and its argmax have the law of the plain loop. Gaps
    between candidates are geometric and are sampled directly.
    """
    k = m.size
    if setup is None:
        mu_d, c_var, log_u = (x[0] for x in _rare_setup(m[None], cov[None], np.array([leader])))
    else:
        mu_d, c_var, log_u = setup
    top = log_u.max()
    w = np.exp(log_u - top)
    U = float(np.exp(top) * w.sum())
    if not 0.0 < U < 1.0:
        raise ValueError("union bound outside (0, 1)")
    cdf = np.cumsum(w / w.sum())
    pos = 0
    while True:
        pos += int(rng.geometric(U))
        if pos > budget:
            return -1, budget
        j = min(int(np.searchsorted(cdf, rng.random(), side="right")), k - 1)
        while log_u[j] == -np.inf:  # guard against rounding at the cdf's end
            j -= 1
        # nu_j - nu_leader conditioned to be positive
        ws = -ndtri_exp(log_u[j] + np.log(rng.random()))
        diff = mu_d[j] + np.sqrt(c_var[j]) * ws
        nu = m + factor @ rng.standard_normal(k)
        c = cov[j] - cov[leader]  # cov(nu, nu_j - nu_leader)
        nu = nu + c * ((diff - (nu[j] - nu[leader])) / c_var[j])
        above = nu > nu[leader]
        above[leader] = False
        above[j] = True
        if rng.random() * above.sum() < 1.0:
            return int(argmax_lowest(nu)), pos


def dts_batch(m, s2, beta, first_normals, coin_u, fallback_u,
              resample: Callable[[np.ndarray, int], np.ndarray],
              max_resamples: int = DEFAULT_MAX_RESAMPLES,
              factor: Optional[np.ndarray] = None,
              pair_var: Optional[np.ndarray] = None,
              exhaustion_tol: float = 1e-12,
              first_block: int = 8,
              rng_for: Optional[Callable[[int], np.random.Generator]] = None,
              thin_below: float = 0.05) -> BatchDecision:
    """Top-two selection for a batch of independent posterior states.

    Parameters
    ----------
    m, s2 : ndarray of shape (n, k)
        Posterior means and variances of the population means.
    beta : float or ndarray of shape (n,)
        Probability of playing the leader.
    first_normals : ndarray of shape (n, k)
        Standard normals for the leader draw.
    coin_u, fallback_u : ndarray of shape (n,)
        Uniforms for the coin and for the fallback challenger.
    resample : callable
        ``resample(rows, b)`` returns standard normals of shape
        ``(len(rows), b, k)`` for the replications ``rows``; successive
        calls must continue each replication's own stream.
    max_resamples : int
        Redraw budget per selection.
    factor : ndarray of shape (n, k, k), optional
        Square-root factor of the joint covariance of the population
        means. When given, draws are ``m + factor @ z`` instead of
        independent.
    pair_var : ndarray of shape (n, k, k), optional
        Variance of ``nu_i - nu_j``, used for the early-exhaustion bound
        when arms are correlated.
    exhaustion_tol : float
        A redraw loop is skipped (treated as exhausted) when a union bound
        shows it would find a challenger within the budget with
        probability below this value.
    first_block : int
        Size of the first block of redraws.
    rng_for : callable, optional
        ``rng_for(row)`` returns the generator that continues a
        replication's redraws. When given, replications whose union bound
        ``sum_j Phi(-Z_{leader,j})`` is below ``thin_below`` and that
        missed in the first block finish with :func:`_rare_challenger`,
        which samples the same outcome without drawing every failure.
    thin_below : float

    Notes
    -----
    With two arms the challenger is always the other arm, so no redraws
    are made. For more arms the loop runs in blocks; the number of draws
    recorded is the position of the first success in the redraw
    sequence. The early exit uses ``1 - alpha_leader <= sum_j
    Phi(-Z_{leader,j})``: the probability of success within
    ``max_resamples`` draws is at most ``max_resamples`` times that sum.
    """
    m = np.asarray(m, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    n, k = m.shape
    rows_all = np.arange(n)

    z0 = np.asarray(first_normals, dtype=float)
    if factor is None:
        nu0 = m + np.sqrt(s2) * z0
    else:
        nu0 = m + np.einsum("rij,rj->ri", factor, z0)
    leader = argmax_lowest(nu0, axis=1)
    draws = np.zeros(n, dtype=np.int64)
    fallback = np.zeros(n, dtype=bool)
    if k == 1:
        challenger = leader.copy()
    elif k == 2:
        challenger = 1 - leader
    else:
        challenger = np.full(n, -1)
        zl = z_matrix(m, s2, leader)
        if pair_var is None:
            zb = zl
        else:
            mL = m[rows_all, leader][:, None]
            v = pair_var[rows_all, leader, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                zb = np.where(v > 0, (mL - m) / np.sqrt(np.maximum(v, 0)),
                              np.where(mL > m, np.inf, np.where(mL < m, -np.inf, 0.0)))
            zb[rows_all, leader] = np.inf
        log_bound = logsumexp(log_ndtr(-zb), axis=1)
        hopeless = log_bound + np.log(max_resamples) < np.log(exhaustion_tol)
        todo = rows_all[~hopeless]
        used = np.zeros(n, dtype=np.int64)
        b = first_block
        while todo.size:
            b = min(b, max_resamples - int(used[todo].min()))
            z = np.asarray(resample(todo, b))
            nu = (m[todo, None, :] + np.sqrt(s2[todo])[:, None, :] * z) if factor is None \
                else m[todo, None, :] + np.einsum("rij,rbj->rbi", factor[todo], z)
            best = np.argmax(nu, axis=2)
            hit = best != leader[todo, None]
            # a replication may have less budget left than b
            allowed = np.arange(b)[None, :] < (max_resamples - used[todo])[:, None]
            hit &= allowed
            found = hit.any(axis=1)
            first = np.argmax(hit, axis=1)
            rows = todo[found]
            challenger[rows] = best[found, first[found]]
            draws[rows] = used[rows] + first[found] + 1
            used[todo] += np.minimum(b, max_resamples - used[todo])
            todo = todo[~found]
            done = used[todo] >= max_resamples
            draws[todo[done]] = max_resamples
            todo = todo[~done]
            if rng_for is not None and todo.size:
                # rare successes: switch to the exact candidate sampler
                rare = log_bound[todo] < np.log(thin_below)
                rr = todo[rare]
                if rr.size:
                    if factor is None:
                        cov = s2[rr][:, :, None] * np.eye(k)
                        fac = np.sqrt(s2[rr])[:, :, None] * np.eye(k)
                    else:
                        fac = factor[rr]
                        cov = fac @ np.swapaxes(fac, 1, 2)
                    mu_d, c_var, log_u = _rare_setup(m[rr], cov, leader[rr])
                    for q, r in enumerate(rr):
                        ch, nd = _rare_challenger(m[r], cov[q], fac[q], int(leader[r]),
                                                  max_resamples - int(used[r]), rng_for(r),
                                                  setup=(mu_d[q], c_var[q], log_u[q]))
                        challenger[r] = ch
                        draws[r] = used[r] + nd
                todo = todo[~rare]
            b *= 4
        fallback = challenger < 0
        if np.any(fallback):
            idx = np.flatnonzero(fallback)
            challenger[idx] = _challenger_fallback(zl[idx], leader[idx], np.asarray(fallback_u)[idx])
    coin = (np.asarray(coin_u) < beta).astype(np.int64)
    arm = np.where(coin == 1, leader, challenger)
    return BatchDecision(arm, leader, challenger, coin, draws, fallback)


def dts_select(state: GaussianPosterior, beta_t: float, rng: np.random.Generator,
               max_resamples: int = DEFAULT_MAX_RESAMPLES, *,
               with_propensities: bool = False,
               exhaustion_tol: float = 1e-12) -> PolicyDecision:
    """Deconfounded Thompson sampling selection for one posterior state.

    Parameters
    ----------
    state : GaussianPosterior
    beta_t : float in (0, 1]
        Probability of playing the leader.
    rng : Generator
    max_resamples : int, default=10000
    with_propensities : bool, default=False
        Attach the exact selection probabilities (costs one quadrature).
    exhaustion_tol : float, default=1e-12

    Returns
    -------
    PolicyDecision
    """
    if not 0.0 < beta_t <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    m, s2 = state.m[None, :], state.s2[None, :]
    k = m.shape[1]
    factor = pair_var = None
    if not state.independent:
        Q = state.population_covariance()
        factor = _psd_factor(Q)[None]
        dq = np.diag(Q)
        pair_var = (dq[:, None] + dq[None, :] - 2 * Q)[None]
    first = rng.standard_normal((1, k))
    coin_u = rng.random(1)
    fb_u = rng.random(1)
    dec = dts_batch(m, s2, beta_t, first, coin_u, fb_u,
                    lambda rows, b: rng.standard_normal((rows.size, b, k)),
                    max_resamples, factor=factor, pair_var=pair_var,
                    exhaustion_tol=exhaustion_tol, rng_for=lambda r: rng).row(0)
    if with_propensities:
        alpha = state.optimal_arm_probabilities()
        dec.propensities = dts_propensities(alpha, beta_t)
    return dec


def dts_propensities(alpha, beta_t: float) -> np.ndarray:
    """Selection probabilities of top-two sampling.

    ``psi_i = alpha_i * (beta + (1 - beta) * sum_{j != i} alpha_j / (1 - alpha_j))``

    Parameters
    ----------
    alpha : array_like of shape (k,)
        Probability each arm is best; must lie strictly inside the simplex.
    beta_t : float

    Raises
    ------
    ValueError
        If some ``alpha_i`` is 0 or 1.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        raise ValueError("degenerate posterior probabilities")
    ratio = alpha / (1.0 - alpha)
    return alpha * (beta_t + (1.0 - beta_t) * (ratio.sum() - ratio))


# ---------------------------------------------------------------------------
# other rules


def uniform_batch(k: int, u) -> BatchDecision:
    arm = np.minimum((np.asarray(u) * k).astype(np.int64), k - 1)
    return BatchDecision(arm, arm, arm)


def uniform_select(k: int, rng: np.random.Generator) -> PolicyDecision:
    """Play an arm uniformly at random."""
    dec = uniform_batch(k, rng.random(1)).row(0)
    dec.propensities = np.full(k, 1.0 / k)
    return dec


def thompson_batch(m, s2, normals) -> BatchDecision:
    """Argmax of independent draws ``N(m, s2)`` (context-unaware TS kernel)."""
    arm = argmax_lowest(np.asarray(m) + np.sqrt(s2) * normals, axis=1)
    return BatchDecision(arm, arm, arm)


def context_unaware_ts_select(naive_state: NaivePosterior, rng: np.random.Generator) -> PolicyDecision:
    """Thompson sampling on the context-unaware belief."""
    m, s2 = naive_state.summaries()
    return thompson_batch(m[None], s2[None], rng.standard_normal((1, m.size))).row(0)


def ucb_batch(m, s2, z: float) -> BatchDecision:
    arm = argmax_lowest(np.asarray(m) + z * np.sqrt(s2), axis=1)
    return BatchDecision(arm, arm, arm)


def deconfounded_ucb_select(state: GaussianPosterior, z: float = DEFAULT_UCB_Z) -> PolicyDecision:
    """Optimism on the population mean: argmax of ``m_i + z s_i``."""
    if z <= 0:
        raise ValueError("z must be positive")
    return ucb_batch(state.m[None], state.s2[None], z).row(0)


def contextual_ts_batch(theta_draws, contexts, n_arms: int) -> BatchDecision:
    """Argmax over arms of ``<theta~^(j), x>`` for sampled parameters.

    Parameters
    ----------
    theta_draws : ndarray of shape (n, d*k)
    contexts : ndarray of shape (n, d)
    """
    th = np.asarray(theta_draws).reshape(len(theta_draws), n_arms, -1)
    arm = argmax_lowest(np.einsum("rkd,rd->rk", th, contexts), axis=1)
    return BatchDecision(arm, arm, arm)


def contextual_ts_select(state: GaussianPosterior, current_context, rng: np.random.Generator) -> PolicyDecision:
    """Contextual Thompson sampling: best arm for the current context under a posterior draw."""
    theta = state.sample_theta(rng)
    x = np.asarray(current_context, dtype=float)[None]
    return contextual_ts_batch(theta[None], x, state.n_arms_).row(0)


# ---------------------------------------------------------------------------
# estimator-style wrappers used by configs and the harness


class _Policy(BaseEstimator):
    name = ""
    needs_context = False
    uses_naive_state = False

    def select(self, state, rng, context=None) -> PolicyDecision:  # pragma: no cover
        raise NotImplementedError


class DTS(_Policy):
    """Deconfounded Thompson sampling.

    Parameters
    ----------
    beta : float or "plugin", default=0.5
        Fixed coin bias, or ``"plugin"`` to set it each period from the
        posterior means by the optimal-allocation fixed point.
    max_resamples : int, default=10000
    exhaustion_tol : float, default=1e-12
    """

    name = "dts"

    def __init__(self, beta=0.5, max_resamples: int = DEFAULT_MAX_RESAMPLES,
                 exhaustion_tol: float = 1e-12):
        self.beta = beta
        self.max_resamples = max_resamples
        self.exhaustion_tol = exhaustion_tol

    @property
    def plugin(self) -> bool:
        return isinstance(self.beta, str)

    def validate(self):
        if isinstance(self.beta, str):
            if self.beta != "plugin":
                raise ValueError(f"beta must be a number or 'plugin', got {self.beta!r}")
        elif not 0.0 < float(self.beta) <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if int(self.max_resamples) < 1:
            raise ValueError("max_resamples must be positive")
        return self

    def select(self, state, rng, context=None, beta_t=None):
        if beta_t is None:
            if self.plugin:
                from .allocation import solve_beta

                beta_t = solve_beta(state.m, 0.5)
            else:
                beta_t = float(self.beta)
        return dts_select(state, beta_t, rng, self.max_resamples, exhaustion_tol=self.exhaustion_tol)


class Uniform(_Policy):
    """Uniform random allocation."""

    name = "uniform"

    def validate(self):
        return self

    def select(self, state, rng, context=None):
        return uniform_select(state.n_arms_, rng)


class NaiveTS(_Policy):
    """Context-unaware Thompson sampling.

    Parameters
    ----------
    prior_variance : float, default=1.0
        Prior variance of every arm's single mean in the naive model.
    """

    name = "naive-ts"
    uses_naive_state = True

    def __init__(self, prior_variance: float = 1.0):
        self.prior_variance = prior_variance

    def validate(self):
        if not self.prior_variance > 0:
            raise ValueError("prior_variance must be positive")
        return self

    def select(self, state, rng, context=None):
        return context_unaware_ts_select(state, rng)


class DeconfoundedUCB(_Policy):
    """Upper confidence bound on the population mean.

    Parameters
    ----------
    z : float, default=1.645
    """

    name = "deconfounded-ucb"

    def __init__(self, z: float = DEFAULT_UCB_Z):
        self.z = z

    def validate(self):
        if not self.z > 0:
            raise ValueError("z must be positive")
        return self

    def select(self, state, rng=None, context=None):
        return deconfounded_ucb_select(state, self.z)


class ContextualTS(_Policy):
    """Thompson sampling for the best arm in the current context."""

    name = "contextual-ts"
    needs_context = True

    def validate(self):
        return self

    def select(self, state, rng, context=None):
        if context is None:
            raise ValueError("contextual TS needs the current context")
        return contextual_ts_select(state, context, rng)


_REGISTRY = {
    "dts": DTS,
    "uniform": Uniform,
    "naive-ts": NaiveTS,
    "deconfounded-ucb": DeconfoundedUCB,
    "contextual-ts": ContextualTS,
}
POLICY_NAMES: Sequence[str] = tuple(_REGISTRY)


def make_policy(spec) -> _Policy:
    """Build a policy from a name or a mapping ``{"name": ..., **params}``.

    Raises
    ------
    ValueError
        Unknown name or invalid parameters.
    """
    if isinstance(spec, _Policy):
        return spec.validate()
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in _REGISTRY:
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
    try:
        return _REGISTRY[name](**spec).validate()
    except TypeError as exc:
        raise ValueError(f"bad parameters for policy {name!r}: {exc}") from None
