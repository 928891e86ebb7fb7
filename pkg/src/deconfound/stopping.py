"""Stopping rule, final selection and the sampling-cost objective.

The experiment stops at the first period ``t`` where the leading arm's
z-score against every other arm clears ``gamma_t + sqrt(gamma_t)`` with
``gamma_t = sqrt(2 log(t^3 / delta))``. The arm finally deployed is the
Bayes choice on the full-information posterior, after every pending
reward has been released.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import argmax_lowest
from .posterior import DelayBuffer, GaussianPosterior, z_matrix

__all__ = [
    "StoppingConfig",
    "threshold",
    "should_stop",
    "stop_statistic",
    "bayes_select",
    "combined_cost",
]


@dataclass(frozen=True)
class StoppingConfig:
    """Parameters of the z-threshold stopping rule.

    Parameters
    ----------
    delta : float in (0, 1)
        Error parameter. In cost experiments it is set to the per-period
        cost ``c``.
    max_horizon : int, default=1_000_000
        Safety cap; reaching it stops the run and is flagged.
    """

    delta: float
    max_horizon: int = 1_000_000

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if int(self.max_horizon) < 1:
            raise ValueError("max_horizon must be positive")


def threshold(t, delta: float):
    """``gamma_t + sqrt(gamma_t)`` with ``gamma_t = sqrt(2 log(t^3/delta))``.

    Works elementwise on arrays of ``t``. Returns 0 where ``t^3 / delta <= 1``.

    Examples
    --------
    >>> round(float(threshold(1, 0.1)), 4)
    3.611
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 1):
        raise ValueError("t must be at least 1")
    log_arg = 3.0 * np.log(t) - np.log(delta)
    gamma = np.sqrt(2.0 * np.maximum(log_arg, 0.0))
    out = gamma + np.sqrt(gamma)
    return float(out) if out.ndim == 0 else out


def stop_statistic(m, s2):
    """``min_{j != leader} Z_{leader, j}`` row-wise, with the leader.

    Parameters
    ----------
    m, s2 : ndarray of shape (..., k)

    Returns
    -------
    zmin : ndarray of shape (...)
    leader : ndarray of shape (...)
    """
    m = np.asarray(m, dtype=float)
    leader = argmax_lowest(m, axis=-1)
    z = z_matrix(m, s2, leader)
    return np.min(z, axis=-1), leader


def should_stop(state: GaussianPosterior, t: int, config: StoppingConfig):
    """Stopping decision on the delayed-information posterior.

    Returns
    -------
    stop : bool
    reason : {"threshold", "cap", None}
    """
    if t >= config.max_horizon:
        return True, "cap"
    if state.n_arms_ < 2:
        return True, "threshold"
    zmin, _ = stop_statistic(state.m, state.s2)
    if zmin >= threshold(t, config.delta):
        return True, "threshold"
    return False, None


def bayes_select(state: GaussianPosterior, buffer: DelayBuffer | None = None) -> int:
    """Arm with the largest posterior population mean on full information.

    Pending observations in ``buffer`` are released first, on a copy of
    the state, so the caller's delayed posterior is left untouched.
    """
    if buffer is not None and len(buffer):
        state = state.copy()
        pending = DelayBuffer(buffer.delay)
        pending.pending.extend(buffer.pending)
        pending.flush(state)
    return int(argmax_lowest(state.m))


def combined_cost(c: float, tau: int, regret: float) -> float:
    """Sampling cost plus decision loss, ``c * tau + regret``."""
    if c <= 0:
        raise ValueError("c must be positive")
    if tau < 1:
        raise ValueError("tau must be at least 1")
    return float(c * tau + regret)
