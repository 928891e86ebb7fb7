"""Exact Gaussian posterior over the stacked arm parameters.

The posterior is maintained in covariance form and updated one
observation at a time with the rank-one formula

    C <- C - C phi phi' C / (sigma^2 + phi' C phi)
    mu <- mu + C phi (r - phi' mu) / (sigma^2 + phi' C phi)

where ``phi = e_arm kron x`` is the lifted feature of the observation.
Decisions only depend on the projection of the posterior onto the
population direction: the per-arm mean ``m_i = <x_pop, mu_i>`` and
variance ``s_i^2 = x_pop' C_ii x_pop``.

The module also evaluates the posterior probability that each arm is the
population-best arm, by one-dimensional quadrature (done in log space so
that probabilities far below the float range are still resolved) or by
Monte Carlo.
"""

from __future__ import annotations

import warnings
from collections import deque
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize
from scipy.special import log_ndtr, logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import Instance, PriorSpec, argmax_lowest

__all__ = [
    "GaussianPosterior",
    "DelayBuffer",
    "NaivePosterior",
    "init_posterior",
    "lifted_feature",
    "population_projection",
    "z_score",
    "z_matrix",
    "log_optimal_arm_probabilities",
    "optimal_arm_probabilities",
    "alpha_monte_carlo",
    "log_one_minus_alpha",
    "log_one_minus_alpha_bound",
]

_LOG_2PI_HALF = 0.5 * np.log(2.0 * np.pi)


def lifted_feature(arm: int, context, n_arms: int) -> np.ndarray:
    """Feature ``e_arm kron x`` of an observation of ``arm`` in ``context``."""
    x = np.asarray(context, dtype=float).ravel()
    phi = np.zeros(n_arms * x.size)
    phi[arm * x.size:(arm + 1) * x.size] = x
    return phi


def population_projection(x_pop, n_arms: int) -> np.ndarray:
    """Matrix ``P`` of shape (k, d*k) with rows ``e_i kron x_pop``."""
    return np.kron(np.eye(n_arms), np.asarray(x_pop, dtype=float).ravel()[None, :])


class GaussianPosterior(BaseEstimator):
    """Posterior over the stacked parameter of a linear Gaussian bandit.

    Parameters
    ----------
    prior : PriorSpec
        Prior mean, covariance and noise variance.
    x_pop : array_like of shape (d,)
        Population context vector.
    resymmetrize_every : int, default=256
        The covariance is replaced by ``(C + C')/2`` after this many
        updates, to keep rounding drift bounded.

    Attributes
    ----------
    mean_ : ndarray of shape (d*k,)
    covariance_ : ndarray of shape (d*k, d*k)
    n_obs_ : ndarray of shape (k,)
        Number of incorporated observations per arm.
    n_updates_ : int

    Notes
    -----
    With ``sigma^2 = 0`` only standard-basis contexts are accepted. An
    observation then conditions the observed coordinate exactly; a repeat
    observation of a coordinate that is already known carries no
    information and leaves the state unchanged.
    """

    def __init__(self, prior: PriorSpec, x_pop, resymmetrize_every: int = 256):
        self.prior = prior
        self.x_pop = x_pop
        self.resymmetrize_every = resymmetrize_every

    # -- construction -----------------------------------------------------
    def reset(self) -> "GaussianPosterior":
        """Set the state to the prior."""
        prior = self.prior
        self.n_arms_ = prior.n_arms
        self.dimension_ = prior.dimension
        self.x_pop_ = np.asarray(self.x_pop, dtype=float).ravel()
        if self.x_pop_.size != self.dimension_:
            raise ValueError("x_pop does not match the prior dimension")
        self.projection_ = population_projection(self.x_pop_, self.n_arms_)
        self.mean_ = np.array(prior.mean, dtype=float)
        self.covariance_ = np.array(prior.covariance, dtype=float)
        self.n_obs_ = np.zeros(self.n_arms_, dtype=int)
        self.n_updates_ = 0
        return self

    def fit(self, contexts, arms, rewards) -> "GaussianPosterior":
        """Reset to the prior and incorporate a batch of observations.

        Parameters
        ----------
        contexts : array_like of shape (n, d)
        arms : array_like of shape (n,)
        rewards : array_like of shape (n,)
        """
        self.reset()
        return self.partial_fit(contexts, arms, rewards)

    def partial_fit(self, contexts, arms, rewards) -> "GaussianPosterior":
        """Incorporate observations sequentially with rank-one updates."""
        if not hasattr(self, "mean_"):
            self.reset()
        contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        arms = np.atleast_1d(np.asarray(arms, dtype=int))
        rewards = np.atleast_1d(np.asarray(rewards, dtype=float))
        if not (contexts.shape[0] == arms.size == rewards.size):
            raise ValueError("contexts, arms and rewards must have the same length")
        for x, a, r in zip(contexts, arms, rewards):
            self.update(int(a), x, float(r))
        return self

    def update(self, arm: int, context, reward: float) -> "GaussianPosterior":
        """Condition on a single observation."""
        check_is_fitted(self, "mean_")
        x = np.asarray(context, dtype=float).ravel()
        d, k = self.dimension_, self.n_arms_
        if x.size != d:
            raise ValueError(f"context has dimension {x.size}, expected {d}")
        if not 0 <= arm < k:
            raise IndexError(f"arm index {arm} out of range for {k} arms")
        if not np.isfinite(reward):
            raise ValueError("reward must be finite")
        sigma2 = self.prior.noise_variance
        if sigma2 == 0.0 and not (np.all((x == 0) | (x == 1)) and x.sum() == 1):
            raise ValueError("noiseless observations need a standard-basis context")
        sl = slice(arm * d, (arm + 1) * d)
        g = self.covariance_[:, sl] @ x  # C phi
        quad = float(g[sl] @ x)
        den = sigma2 + quad
        self.n_obs_[arm] += 1
        if den <= 1e-14 * max(1.0, float(np.max(np.diag(self.covariance_)))):
            # noiseless repeat of a known coordinate
            return self
        resid = reward - float(self.mean_[sl] @ x)
        self.mean_ += g * (resid / den)
        self.covariance_ -= np.outer(g, g) / den
        self.n_updates_ += 1
        if self.n_updates_ % self.resymmetrize_every == 0:
            self.covariance_ = 0.5 * (self.covariance_ + self.covariance_.T)
        return self

    # -- summaries ----------------------------------------------------------
    @property
    def m(self) -> np.ndarray:
        """Posterior means of the population means, shape (k,)."""
        check_is_fitted(self, "mean_")
        return self.projection_ @ self.mean_

    @property
    def s2(self) -> np.ndarray:
        """Posterior variances of the population means, shape (k,)."""
        P = self.projection_
        return np.maximum(np.einsum("kd,de,ke->k", P, self.covariance_, P), 0.0)

    def population_covariance(self) -> np.ndarray:
        """Joint posterior covariance of the k population means."""
        P = self.projection_
        return P @ self.covariance_ @ P.T

    @property
    def independent(self) -> bool:
        """True when the population means are a posteriori independent."""
        Q = self.population_covariance()
        off = Q - np.diag(np.diag(Q))
        return bool(np.all(np.abs(off) <= 1e-14 * max(1.0, np.abs(Q).max())))

    def arm_mean(self, i: int) -> np.ndarray:
        d = self.dimension_
        return self.mean_[i * d:(i + 1) * d]

    def arm_covariance(self, i: int) -> np.ndarray:
        d = self.dimension_
        return self.covariance_[i * d:(i + 1) * d, i * d:(i + 1) * d]

    def z_score(self, i: int, j: int, covariance_aware: bool = False) -> float:
        """Standardised gap between the population means of arms i and j.

        The default divides by ``sqrt(s_i^2 + s_j^2)``. With
        ``covariance_aware=True`` the posterior covariance between the two
        population means is subtracted, which only matters for priors
        coupling arms.
        """
        m, s2 = self.m, self.s2
        cov = self.population_covariance()[i, j] if covariance_aware else 0.0
        return z_score(m, s2, i, j, cov)

    def leader(self) -> int:
        """Arm with the largest posterior population mean (lowest index on ties)."""
        return int(argmax_lowest(self.m))

    # -- sampling -------------------------------------------------------------
    def sample_population_means(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draw the vector of population means from the posterior.

        Independent draws ``N(m_i, s_i^2)`` when arms are uncorrelated,
        otherwise a draw from the exact joint Gaussian of the k means.
        """
        m = self.m
        shape = (m.size,) if size is None else (size, m.size)
        z = rng.standard_normal(shape)
        if self.independent:
            return m + np.sqrt(self.s2) * z
        return m + z @ _psd_factor(self.population_covariance()).T

    def sample_theta(self, rng: np.random.Generator) -> np.ndarray:
        """Draw the stacked parameter from the posterior."""
        z = rng.standard_normal(self.mean_.size)
        if self.prior.has_cross_arm_covariance:
            return self.mean_ + _psd_factor(self.covariance_) @ z
        d = self.dimension_
        out = self.mean_.copy()
        for i in range(self.n_arms_):
            sl = slice(i * d, (i + 1) * d)
            out[sl] += _psd_factor(self.covariance_[sl, sl]) @ z[sl]
        return out

    def optimal_arm_probabilities(self, method: str = "quadrature", n: int = 100_000,
                                  rng: Optional[np.random.Generator] = None,
                                  atol: float = 1e-6) -> np.ndarray:
        """Posterior probability that each arm has the largest population mean.

        Parameters
        ----------
        method : {"quadrature", "monte-carlo"}
        n : int
            Number of joint draws for the Monte Carlo method.
        rng : Generator, optional
        atol : float
            Absolute tolerance of the quadrature.
        """
        if method == "quadrature" and not self.independent:
            warnings.warn("population means are correlated; using Monte Carlo for alpha",
                          RuntimeWarning, stacklevel=2)
            method = "monte-carlo"
        if method == "quadrature":
            return optimal_arm_probabilities(self.m, self.s2, atol=atol)
        if method == "monte-carlo":
            rng = np.random.default_rng() if rng is None else rng
            return alpha_monte_carlo(self.m, self.population_covariance(), n, rng)
        raise ValueError(f"unknown method {method!r}")

    def copy(self) -> "GaussianPosterior":
        from copy import deepcopy

        return deepcopy(self)


def init_posterior(instance: Instance) -> GaussianPosterior:
    """Posterior state equal to the instance's prior."""
    return GaussianPosterior(instance.prior, instance.x_pop).reset()


def _psd_factor(cov) -> np.ndarray:
    """Square-root factor ``L`` with ``L L' = cov`` for PSD ``cov``."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


class _Pending(NamedTuple):
    period: int
    arm: int
    context: np.ndarray
    reward: float


class DelayBuffer:
    """FIFO of observations awaiting release.

    An observation made in period ``l`` becomes usable in period ``t``
    once ``l <= t - delay``.

    Parameters
    ----------
    delay : int
        Delay ``L >= 1``.
    """

    def __init__(self, delay: int = 1):
        if delay < 1:
            raise ValueError("delay must be at least 1")
        self.delay = int(delay)
        self.pending: deque[_Pending] = deque()

    def __len__(self):
        return len(self.pending)

    def record(self, period: int, arm: int, context, reward: float) -> None:
        if not np.isfinite(reward):
            raise ValueError("reward must be finite")
        if self.pending and period < self.pending[-1].period:
            raise ValueError("observations must be recorded in period order")
        self.pending.append(_Pending(int(period), int(arm), np.asarray(context, float), float(reward)))

    def release(self, posterior: GaussianPosterior, current_period: int) -> int:
        """Incorporate every pending observation with period <= current - delay.

        Returns
        -------
        int
            Number of observations released.
        """
        cutoff = current_period - self.delay
        n = 0
        while self.pending and self.pending[0].period <= cutoff:
            obs = self.pending.popleft()
            posterior.update(obs.arm, obs.context, obs.reward)
            n += 1
        return n

    def flush(self, posterior: GaussianPosterior) -> int:
        """Release everything, giving the full-information posterior."""
        n = len(self.pending)
        while self.pending:
            obs = self.pending.popleft()
            posterior.update(obs.arm, obs.context, obs.reward)
        return n


class NaivePosterior(BaseEstimator):
    """Context-unaware per-arm Gaussian belief.

    Treats every arm as having a single mean reward with prior
    ``N(0, prior_variance)``, ignoring contexts:
    ``s~^2 = (1/v + n/sigma^2)^-1`` and ``m~ = s~^2 * sum(R) / sigma^2``.
    For ``sigma^2 = 0`` the limit is used: after the first play the mean is
    the empirical average and the variance is zero.

    Parameters
    ----------
    n_arms : int
    noise_variance : float, default=1.0
    prior_variance : float, default=1.0
    """

    def __init__(self, n_arms: int, noise_variance: float = 1.0, prior_variance: float = 1.0):
        self.n_arms = n_arms
        self.noise_variance = noise_variance
        self.prior_variance = prior_variance

    def reset(self) -> "NaivePosterior":
        self.counts_ = np.zeros(self.n_arms, dtype=int)
        self.sums_ = np.zeros(self.n_arms)
        return self

    def update(self, arm: int, reward: float) -> "NaivePosterior":
        if not hasattr(self, "counts_"):
            self.reset()
        self.counts_[arm] += 1
        self.sums_[arm] += reward
        return self

    def summaries(self):
        """Return ``(m~, s~^2)`` as two arrays of shape (k,)."""
        if not hasattr(self, "counts_"):
            self.reset()
        return naive_summaries(self.counts_, self.sums_, self.noise_variance, self.prior_variance)


def naive_summaries(counts, sums, noise_variance, prior_variance=1.0):
    """Vectorised context-unaware summaries (works on any leading shape)."""
    counts = np.asarray(counts, dtype=float)
    sums = np.asarray(sums, dtype=float)
    if noise_variance == 0.0:
        played = counts > 0
        m = np.where(played, sums / np.maximum(counts, 1.0), 0.0)
        s2 = np.where(played, 0.0, prior_variance)
        return m, s2
    s2 = 1.0 / (1.0 / prior_variance + counts / noise_variance)
    m = s2 * sums / noise_variance
    return m, s2


# ---------------------------------------------------------------------------
# z-scores


def z_score(m, s2, i: int, j: int, cov_ij: float = 0.0) -> float:
    """``(m_i - m_j) / sqrt(s_i^2 + s_j^2 - 2 cov_ij)``.

    Raises
    ------
    ValueError
        If the variance is zero and the means coincide.
    """
    diff = float(m[i] - m[j])
    var = float(s2[i] + s2[j] - 2.0 * cov_ij)
    if var <= 0.0:
        if diff == 0.0:
            raise ValueError("degenerate z-score")
        return float(np.copysign(np.inf, diff))
    return diff / np.sqrt(var)


def z_matrix(m, s2, leader=None):
    """z-scores of every arm against ``leader`` (vectorised over rows).

    Parameters
    ----------
    m, s2 : ndarray of shape (..., k)
    leader : ndarray of shape (...,), optional
        Defaults to the row-wise argmax of ``m``.

    Returns
    -------
    ndarray of shape (..., k)
        ``Z[..., j] = (m_leader - m_j) / sqrt(s2_leader + s2_j)``; the
        leader's own entry is ``+inf``. Zero variance with a positive gap
        gives ``+inf``, with a zero gap gives 0.
    """
    m = np.asarray(m, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if leader is None:
        leader = np.argmax(m, axis=-1)
    leader = np.asarray(leader)
    mL = np.take_along_axis(m, leader[..., None], axis=-1)
    sL = np.take_along_axis(s2, leader[..., None], axis=-1)
    gap = mL - m
    var = sL + s2
    with np.errstate(divide="ignore", invalid="ignore"):
        z = gap / np.sqrt(var)
    z = np.where(var > 0, z, np.where(gap > 0, np.inf, np.where(gap < 0, -np.inf, 0.0)))
    np.put_along_axis(z, leader[..., None], np.inf, axis=-1)
    return z


# ---------------------------------------------------------------------------
# probability that each arm is best


def _log_integrand(u, i, m, s, pos, zero_max):
    """Log of ``phi_i(u) prod_{j != i} Phi_j(u)`` for positive-variance arms."""
    u = np.asarray(u, dtype=float)
    out = -0.5 * ((u - m[i]) / s[i]) ** 2 - np.log(s[i]) - _LOG_2PI_HALF
    for j in pos:
        if j != i:
            out = out + log_ndtr((u - m[j]) / s[j])
    if zero_max is not None:
        out = np.where(u > zero_max, out, -np.inf)
    return out


def _mode(i, m, s, pos):
    """Mode of the (log-concave) integrand for arm i."""
    def dlog(u):
        g = -(u - m[i]) / s[i] ** 2
        for j in pos:
            if j != i:
                z = (u - m[j]) / s[j]
                # inverse Mills ratio phi(z)/Phi(z), computed stably
                g += np.exp(-0.5 * z * z - _LOG_2PI_HALF - log_ndtr(z)) / s[j]
        return g

    lo = m[i]
    hi = max(m[i], float(np.max(m[pos]))) + 10.0 * float(np.max(s[pos]))
    if dlog(hi) >= 0:  # pragma: no cover - cannot happen for finite inputs
        return hi
    if dlog(lo) <= 0:
        return lo
    return optimize.brentq(dlog, lo, hi, xtol=1e-12 * max(1.0, abs(hi)), rtol=1e-12)


def _log_trapezoid(f, h):
    w = np.full(f.size, np.log(h))
    w[0] -= np.log(2.0)
    w[-1] -= np.log(2.0)
    return logsumexp(f + w)


def _log_alpha_continuous(i, m, s, pos, zero_max, atol, rtol, max_nodes):
    mode = _mode(i, m, s, pos)
    width = 12.0 * s[i]
    lo = mode - width
    if zero_max is not None:
        lo = max(lo, zero_max)
    hi = max(lo, mode) + width
    n = 64
    prev = None
    while True:
        u = np.linspace(lo, hi, n + 1)
        f = _log_integrand(u, i, m, s, pos, zero_max)
        # the indicator makes the left end a jump; evaluate it from the right
        if zero_max is not None and u[0] <= zero_max:
            f[0] = _log_integrand(np.nextafter(zero_max, np.inf), i, m, s, pos, None)
        val = _log_trapezoid(f, (hi - lo) / n)
        if prev is not None:
            close_log = abs(val - prev) <= rtol or (np.isinf(val) and np.isinf(prev))
            close_abs = abs(np.exp(val) - np.exp(prev)) <= atol
            if close_log and close_abs:
                return val
        if n >= max_nodes:
            warnings.warn("alpha quadrature reached the node limit before converging",
                          RuntimeWarning, stacklevel=3)
            return val
        prev = val
        n *= 2


def log_optimal_arm_probabilities(m, s2, atol: float = 1e-6, rtol: float = 1e-6,
                                  max_nodes: int = 1 << 16) -> np.ndarray:
    """Log of the probability that each arm has the largest draw.

    Evaluates ``log alpha_i = log int phi_i(u) prod_{j != i} Phi_j(u) du``
    for independent ``N(m_j, s2_j)`` draws. Each integrand is log-concave;
    it is integrated over twelve standard deviations either side of its
    mode with the trapezoid rule, doubling the nodes until successive
    estimates agree to ``atol`` in probability and ``rtol`` in log
    probability. Working in log space resolves probabilities such as
    ``1e-400`` that underflow in linear space.

    Zero-variance arms are point masses. Among tied point masses the
    lowest index wins.

    Parameters
    ----------
    m, s2 : array_like of shape (k,)
    atol, rtol : float
    max_nodes : int

    Returns
    -------
    ndarray of shape (k,)
    """
    m = np.asarray(m, dtype=float).ravel()
    s2 = np.asarray(s2, dtype=float).ravel()
    if m.shape != s2.shape:
        raise ValueError("m and s2 must have the same shape")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s2)) and np.all(s2 >= 0)):
        raise ValueError("m must be finite and s2 finite and nonnegative")
    k = m.size
    s = np.sqrt(s2)
    pos = np.flatnonzero(s > 0)
    zero = np.flatnonzero(s == 0)
    out = np.full(k, -np.inf)
    if k == 1:
        return np.zeros(1)
    zero_max = float(m[zero].max()) if zero.size else None
    for i in zero:
        # a point mass wins if it beats every other point mass (ties to
        # lowest index) and every continuous draw falls below it
        others = zero[zero != i]
        if np.any(m[others] > m[i]) or np.any((m[others] == m[i]) & (others < i)):
            continue
        out[i] = float(np.sum(log_ndtr((m[i] - m[pos]) / s[pos]))) if pos.size else 0.0
    for i in pos:
        out[i] = _log_alpha_continuous(i, m, s, pos, zero_max, atol, rtol, max_nodes)
    return out


def optimal_arm_probabilities(m, s2, atol: float = 1e-6) -> np.ndarray:
    """Probability each arm is best under independent Gaussian draws.

    See :func:`log_optimal_arm_probabilities` for the method.

    Examples
    --------
    >>> optimal_arm_probabilities([0.0, 0.0], [1.0, 1.0]).round(6)
    array([0.5, 0.5])
    """
    return np.exp(log_optimal_arm_probabilities(m, s2, atol=atol))


def log_one_minus_alpha(m, s2, arm: int, atol: float = 1e-6) -> float:
    """``log(1 - alpha_arm)``, accurate when ``alpha_arm`` is within 1e-300 of 1."""
    la = log_optimal_arm_probabilities(m, s2, atol=atol, rtol=1e-8)
    others = np.delete(la, arm)
    return float(logsumexp(others)) if others.size else -np.inf


def log_one_minus_alpha_bound(m, s2, arm: int) -> float:
    """Lower bound ``log max_j Phi(-Z_{arm,j}) <= log(1 - alpha_arm)``.

    The event that arm j's draw beats ``arm``'s is contained in the event
    that ``arm`` is not best, so each ``Phi(-Z)`` bounds ``1 - alpha``
    from below.
    """
    z = z_matrix(np.asarray(m)[None], np.asarray(s2)[None], np.array([arm]))[0]
    z = np.delete(z, arm)
    return float(np.max(log_ndtr(-z))) if z.size else -np.inf


def alpha_monte_carlo(mean, cov, n: int, rng: np.random.Generator) -> np.ndarray:
    """Argmax frequencies of ``n`` joint draws from ``N(mean, cov)``."""
    mean = np.asarray(mean, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 1:
        cov = np.diag(cov)
    L = _psd_factor(cov)
    counts = np.zeros(mean.size)
    chunk = 200_000
    done = 0
    while done < n:
        b = min(chunk, n - done)
        draws = mean + rng.standard_normal((b, mean.size)) @ L.T
        counts += np.bincount(np.argmax(draws, axis=1), minlength=mean.size)
        done += b
    return counts / n

