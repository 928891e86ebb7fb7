"""Context processes, rewards and the environment families.

A :class:`ContextProcess` maps a period ``t`` (1-based) and, for random
processes, a uniform variate to the index of a listed context. It never
sees the parameter or past arms and rewards, so contexts cannot carry
information about the policy's behaviour.

The families are

* ``iid``: contexts drawn independently from a finite distribution;
* ``day-of-week``: blocks of ``m`` identical basis contexts, one block
  per day, repeating weekly;
* ``two-phase``: context 1 for the first half of the horizon, context 2
  after, with two arms and noiseless rewards (the counterexample where
  context-unaware sampling and optimism fail);
* ``latent-time``: context ``e_t`` in period ``t``, with a prior in which
  an exponentially correlated time effect shifts every arm;
* ``mainstream``: three arms, two segments, a non-Gaussian prior under
  which contextual Thompson sampling never tries the arm that is best
  on average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .model import (
    ConfigError,
    ContextSpace,
    Instance,
    PopulationSpec,
    PriorSpec,
    build_instance,
)

__all__ = [
    "ContextProcess",
    "Environment",
    "MainstreamEnvironment",
    "make_iid",
    "make_day_of_week",
    "make_two_phase",
    "make_fixed",
    "make_latent_time",
    "make_counterexample_instance",
    "make_latent_confounder_instance",
    "make_mainstream_instance",
    "make_day_of_week_instance",
    "make_reference_instance",
    "exponential_kernel",
    "sample_ar1",
    "reward",
    "build_environment",
    "ENVIRONMENT_NAMES",
]


class ProcessExhausted(IndexError):
    """Raised when a fixed-length context process is asked for too many periods."""


@dataclass(frozen=True)
class ContextProcess:
    """Generator of contexts for each period.

    Parameters
    ----------
    kind : str
        One of ``iid``, ``day-of-week``, ``two-phase``, ``fixed``,
        ``latent-time``.
    contexts : ndarray of shape (n_contexts, d)
    probabilities : ndarray, optional
        Sampling distribution for ``iid``.
    schedule : ndarray of int, optional
        Context index per period for deterministic processes (one cycle).
    cyclic : bool
        Whether the schedule repeats after its end.
    """

    kind: str
    contexts: np.ndarray
    probabilities: Optional[np.ndarray] = None
    schedule: Optional[np.ndarray] = None
    cyclic: bool = False
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ctx = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        ctx.setflags(write=False)
        object.__setattr__(self, "contexts", ctx)
        if self.kind == "iid":
            p = np.asarray(self.probabilities, dtype=float)
            if p.shape != (ctx.shape[0],) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
                raise ConfigError("probabilities must be a distribution over the contexts",
                                  "process.probabilities")
            object.__setattr__(self, "probabilities", p)
            object.__setattr__(self, "_cdf", np.cumsum(p))
        elif self.schedule is None:
            raise ValueError("deterministic processes need a schedule")
        else:
            object.__setattr__(self, "schedule", np.asarray(self.schedule, dtype=np.int64))

    @property
    def is_random(self) -> bool:
        return self.kind == "iid"

    @property
    def dimension(self) -> int:
        return self.contexts.shape[1]

    @property
    def horizon(self) -> Optional[int]:
        """Length of a fixed-length process, None when unbounded."""
        if self.is_random or self.cyclic:
            return None
        return int(self.schedule.size)

    def index(self, t: int, u=None):
        """Context index for period ``t``.

        Parameters
        ----------
        t : int
            Period, starting at 1.
        u : ndarray of shape (n,), optional
            Uniform variates, one per replication (random processes only).

        Returns
        -------
        int or ndarray of int
        """
        if t < 1:
            raise ValueError("periods start at 1")
        if self.is_random:
            if u is None:
                raise ValueError("an iid process needs uniform variates")
            idx = np.searchsorted(self._cdf, np.asarray(u), side="right")
            return np.minimum(idx, self.contexts.shape[0] - 1)
        n = self.schedule.size
        if t > n and not self.cyclic:
            raise ProcessExhausted(f"process of length {n} exhausted at period {t}")
        i = int(self.schedule[(t - 1) % n])
        if u is None:
            return i
        return np.full(np.shape(u), i, dtype=np.int64)

    def step(self, t: int, rng: np.random.Generator) -> np.ndarray:
        """Context vector for period ``t``."""
        u = rng.random(1) if self.is_random else None
        i = self.index(t, u)
        return self.contexts[int(np.ravel(i)[0])]

    def frequencies(self, horizon: Optional[int] = None) -> np.ndarray:
        """Long-run (or over ``horizon`` periods) frequency of each context."""
        n = self.contexts.shape[0]
        if self.is_random:
            return self.probabilities.copy()
        sched = self.schedule
        if horizon is not None:
            reps = int(np.ceil(horizon / sched.size))
            sched = np.tile(sched, reps)[:horizon] if (self.cyclic or horizon <= sched.size) else sched
        return np.bincount(sched, minlength=n) / sched.size

    def second_moment(self, horizon: Optional[int] = None) -> np.ndarray:
        """``E[XX']`` under the sampling frequencies."""
        f = self.frequencies(horizon)
        return np.einsum("n,nd,ne->de", f, self.contexts, self.contexts)

    def sequence(self, horizon: int) -> np.ndarray:
        """Context vectors for periods 1..horizon (deterministic processes)."""
        if self.is_random:
            raise ValueError("random processes have no fixed sequence")
        return self.contexts[[self.index(t) for t in range(1, horizon + 1)]]


def make_iid(contexts, probabilities) -> ContextProcess:
    """I.i.d. contexts from a finite distribution.

    Examples
    --------
    >>> make_iid([[1, 0], [0, 1]], [0.5, 0.5]).second_moment()
    array([[0.5, 0. ],
           [0. , 0.5]])
    """
    return ContextProcess("iid", contexts, probabilities=probabilities)


def make_day_of_week(m: int, days: int = 7) -> ContextProcess:
    """``X_t = e_{ceil(t/m)}`` for one week of ``m * days`` periods, then repeat."""
    if m < 1 or days < 1:
        raise ValueError("m and days must be positive")
    sched = np.repeat(np.arange(days), m)
    return ContextProcess("day-of-week", np.eye(days), schedule=sched, cyclic=True,
                          params={"m": m, "days": days})


def make_two_phase(horizon: int) -> ContextProcess:
    """``e_1`` for ``t <= floor(T/2)``, ``e_2`` afterwards."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    half = horizon // 2
    sched = np.r_[np.zeros(half, dtype=int), np.ones(horizon - half, dtype=int)]
    return ContextProcess("two-phase", np.eye(2), schedule=sched, params={"T": horizon})


def make_fixed(contexts) -> ContextProcess:
    """Play the listed context vectors in order, once."""
    ctx = np.atleast_2d(np.asarray(contexts, dtype=float))
    uniq, inv = np.unique(ctx, axis=0, return_inverse=True)
    return ContextProcess("fixed", uniq, schedule=np.ravel(inv))


def make_latent_time(horizon: int) -> ContextProcess:
    """``X_t = e_t`` in ``R^T``."""
    return ContextProcess("latent-time", np.eye(horizon), schedule=np.arange(horizon),
                          params={"T": horizon})


def reward(theta, arm: int, context, sigma2: float, rng: np.random.Generator) -> float:
    """``<theta^(arm), x> + W`` with ``W ~ N(0, sigma2)``; exact mean when ``sigma2 = 0``."""
    x = np.asarray(context, dtype=float)
    d = x.size
    mean = float(np.asarray(theta)[arm * d:(arm + 1) * d] @ x)
    if sigma2 == 0.0:
        return mean
    return mean + np.sqrt(sigma2) * float(rng.standard_normal())


# ---------------------------------------------------------------------------
# environments: an instance plus the process that feeds it


@dataclass
class Environment:
    """Instance, context process and truth sampler used by the simulator.

    Attributes
    ----------
    name : str
    instance : Instance
    process : ContextProcess
    truth_sampler : callable, optional
        ``truth_sampler(rng) -> theta``; defaults to a draw from the
        Gaussian prior.
    """

    name: str
    instance: Instance
    process: ContextProcess
    truth_sampler: Optional[Callable[[np.random.Generator], np.ndarray]] = None
    params: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.instance
        yield self.process

    def __post_init__(self):
        ctx = self.instance.context_space.contexts
        if ctx is None or ctx.shape != self.process.contexts.shape or not np.array_equal(
                ctx, self.process.contexts):
            # the instance must list exactly the process's contexts
            self.instance = _with_contexts(self.instance, self.process.contexts)

    def sample_truth(self, rng: np.random.Generator) -> np.ndarray:
        if self.truth_sampler is not None:
            return np.asarray(self.truth_sampler(rng), dtype=float)
        prior = self.instance.prior
        L = _prior_factor(prior)
        return prior.mean + L @ rng.standard_normal(prior.mean.size)

    def second_moment(self) -> np.ndarray:
        return self.process.second_moment()


_FACTORS: dict = {}


def _prior_factor(prior: PriorSpec) -> np.ndarray:
    key = id(prior)
    if key not in _FACTORS:
        _FACTORS[key] = (prior, np.linalg.cholesky(prior.covariance))
    return _FACTORS[key][1]


def _with_contexts(instance: Instance, contexts) -> Instance:
    from dataclasses import replace

    space = ContextSpace(instance.d, contexts)
    return replace(instance, context_space=space)


def make_counterexample_instance(horizon: int = 100, delay: int = 1) -> Environment:
    """Two arms, two contexts visited in two phases, noiseless rewards.

    Arm 1's coefficients are ``N(0, 1)`` and arm 2's ``N(0, 2)``,
    independently per context; the population weights contexts equally.
    """
    ctx = np.eye(2)
    prior = PriorSpec.independent(np.zeros((2, 2)), np.stack([np.eye(2), 2 * np.eye(2)]), 0.0)
    inst = Instance(2, ContextSpace(2, ctx), PopulationSpec.from_weights(ctx, [0.5, 0.5]),
                    prior, None, delay, name="counterexample")
    return Environment("counterexample", inst, make_two_phase(horizon),
                       params={"horizon": horizon, "delay": delay})


def exponential_kernel(horizon: int, kappa: float) -> np.ndarray:
    """``K[x, y] = exp(-|x - y| / kappa)`` on ``{1, ..., T}``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    idx = np.arange(horizon)
    return np.exp(-np.abs(idx[:, None] - idx[None, :]) / kappa)


def sample_ar1(n: int, kappa: float, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) path with lag-``h`` correlation ``exp(-h/kappa)``.

    ``e_1 ~ N(0, v)``, ``e_{t+1} = rho e_t + sqrt(1 - rho^2) sqrt(v) z_t``
    with ``rho = exp(-1/kappa)``; this is the exponential-kernel Gaussian
    process sampled on the integers, in O(n).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    rho = np.exp(-1.0 / kappa)
    z = rng.standard_normal(n)
    out = np.empty(n)
    sd = np.sqrt(variance)
    innov = np.sqrt(1.0 - rho ** 2) * sd
    out[0] = sd * z[0]
    for t in range(1, n):
        out[t] = rho * out[t - 1] + innov * z[t]
    return out


def make_latent_confounder_instance(horizon: int = 1000, arm_variance: float = 1.0,
                                    eps_variance: float = 1.0, kappa: float = 1000.0,
                                    shared: bool = True, n_arms: int = 2,
                                    sigma2: float = 1.0, idio_variance: float = 1e-4,
                                    delay: int = 1, max_horizon: int = 1500) -> Environment:
    """Arms shifted by a slowly varying time effect.

    Coefficient of arm i in period x is ``theta0_i + eps_x + xi_ix``:
    ``theta0_i ~ N(0, arm_variance)``; ``eps`` is a stationary Gaussian
    process with ``corr(eps_x, eps_y) = exp(-|x-y|/kappa)`` and variance
    ``eps_variance``, shared by all arms when ``shared`` (otherwise one
    independent process per arm); ``xi ~ N(0, idio_variance)`` is a small
    idiosyncratic term. The population weights periods equally, so an
    arm's population mean is its average coefficient over the horizon.

    Parameters
    ----------
    horizon : int
        ``T``; contexts are ``e_1, ..., e_T``.
    max_horizon : int
        Guard on ``T`` (the joint covariance has ``(kT)^2`` entries).
    """
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    if kappa <= 0:
        raise ConfigError("kappa must be positive", "kappa")
    if horizon > max_horizon:
        raise ConfigError(f"horizon {horizon} exceeds max_horizon {max_horizon}", "horizon")
    T, k = int(horizon), int(n_arms)
    K = exponential_kernel(T, kappa)
    J = np.ones((T, T))
    if shared:
        cov = np.kron(np.eye(k), arm_variance * J) + np.kron(np.ones((k, k)), eps_variance * K)
        mode = "joint"
    else:
        cov = np.kron(np.eye(k), arm_variance * J + eps_variance * K)
        mode = "independent-arms"
    cov += idio_variance * np.eye(k * T)
    prior = PriorSpec(mode, np.zeros(k * T), cov, sigma2, k, T)
    ctx = np.eye(T)
    inst = Instance(k, ContextSpace(T, ctx), PopulationSpec.from_vector(np.full(T, 1.0 / T)),
                    prior, None, delay, name="latent-confounder")

    def sampler(rng):
        theta0 = np.sqrt(arm_variance) * rng.standard_normal(k)
        if shared:
            eps = np.tile(sample_ar1(T, kappa, eps_variance, rng), (k, 1))
        else:
            eps = np.stack([sample_ar1(T, kappa, eps_variance, rng) for _ in range(k)])
        xi = np.sqrt(idio_variance) * rng.standard_normal((k, T))
        return (theta0[:, None] + eps + xi).ravel()

    params = dict(horizon=T, arm_variance=arm_variance, eps_variance=eps_variance, kappa=kappa,
                  shared=shared, n_arms=k, sigma2=sigma2, idio_variance=idio_variance, delay=delay)
    return Environment("latent-confounder", inst, make_latent_time(T), sampler, params)


def make_day_of_week_instance(m: int = 10, days: int = 7, n_arms: int = 4,
                              prior_variance: float = 1.0, sigma2: float = 1.0,
                              delay: int = 1) -> Environment:
    """Day-of-week environment: independent ``N(0, v I)`` per-arm priors, uniform population."""
    ctx = np.eye(days)
    prior = PriorSpec.independent(np.zeros((n_arms, days)), prior_variance * np.eye(days), sigma2)
    inst = Instance(n_arms, ContextSpace(days, ctx),
                    PopulationSpec.from_weights(ctx, np.full(days, 1.0 / days)),
                    prior, None, delay, name="day-of-week")
    return Environment("day-of-week", inst, make_day_of_week(m, days),
                       params=dict(m=m, days=days, n_arms=n_arms, prior_variance=prior_variance,
                                   sigma2=sigma2, delay=delay))


REFERENCE_THETA = np.array([1.5, 0.5, 0.0, 1.0, 0.5, -0.5])


def make_reference_instance(sigma2: float = 1.0, probabilities=(0.7, 0.3), theta=None,
                            delay: int = 1) -> Environment:
    """Three arms, two i.i.d. contexts sampled off-population.

    Contexts ``e_1, e_2`` arrive with probabilities ``(0.7, 0.3)`` while
    the population weighs them equally. Population means are
    ``(1.0, 0.5, 0.0)`` for the default ``theta``.
    """
    ctx = np.eye(2)
    theta = REFERENCE_THETA if theta is None else np.asarray(theta, dtype=float)
    prior = PriorSpec.independent(np.zeros((3, 2)), np.eye(2), sigma2)
    inst = Instance(3, ContextSpace(2, ctx), PopulationSpec.from_weights(ctx, [0.5, 0.5]),
                    prior, theta, delay, name="reference")
    return Environment("reference", inst, make_iid(ctx, np.asarray(probabilities, float)),
                       params=dict(sigma2=sigma2, probabilities=list(probabilities),
                                   theta=theta.tolist(), delay=delay))


# ---------------------------------------------------------------------------
# the mainstream-action example (non-Gaussian)


@dataclass
class MainstreamEnvironment:
    """Three arms, two segments; arm 3 is nobody's favourite but may be best overall.

    Latent state: ``theta0`` on a uniform grid over ``[0, 1]`` and
    ``theta_x`` in ``{1, 2}`` for each segment ``x``. Mean rewards are
    ``mu(1, e_x) = 1/2 + 1{theta_x = 1}/2``,
    ``mu(2, e_x) = 1/2 + 1{theta_x = 2}/2`` and ``mu(3, x) = theta0``.
    Rewards are noiseless, contexts i.i.d. uniform, the population
    uniform over segments.

    The belief over the latent state is exact: each observation reveals
    one component, and unrevealed components keep their uniform prior.
    """

    grid_size: int = 101
    name: str = "mainstream"

    def __post_init__(self):
        self.grid = np.linspace(0.0, 1.0, self.grid_size)
        self.contexts = np.eye(2)
        self.process = make_iid(self.contexts, [0.5, 0.5])
        self.x_pop = np.array([0.5, 0.5])
        self.k = 3

    def __iter__(self):
        yield self
        yield self.process

    def sample_truth(self, rng: np.random.Generator):
        """Return ``(theta0, theta_1, theta_2)`` with theta0 on the grid."""
        theta0 = self.grid[rng.integers(self.grid_size)]
        seg = rng.integers(1, 3, size=2)
        return float(theta0), int(seg[0]), int(seg[1])

    @staticmethod
    def mean_reward(truth, arm: int, segment: int) -> float:
        theta0, t1, t2 = truth
        tx = (t1, t2)[segment]
        if arm == 0:
            return 0.5 + 0.5 * (tx == 1)
        if arm == 1:
            return 0.5 + 0.5 * (tx == 2)
        return theta0

    def linear_theta(self, truth) -> np.ndarray:
        """Stacked per-arm, per-segment mean table (arm-major, length 6)."""
        return np.array([self.mean_reward(truth, a, x) for a in range(3) for x in range(2)])

    def population_means(self, truth) -> np.ndarray:
        return self.linear_theta(truth).reshape(3, 2) @ self.x_pop

    def best_arm(self, truth) -> int:
        return int(np.argmax(self.population_means(truth)))

    def simple_regret(self, truth, chosen: int) -> float:
        mu = self.population_means(truth)
        return float(mu.max() - mu[chosen])


def make_mainstream_instance(grid_size: int = 101) -> MainstreamEnvironment:
    """The mainstream-action environment (see :class:`MainstreamEnvironment`)."""
    return MainstreamEnvironment(grid_size)


# ---------------------------------------------------------------------------
# configuration


def _iid_environment(cfg, seed):
    inst_cfg = {key: v for key, v in cfg.items() if key not in ("generator", "probabilities")}
    inst = build_instance(inst_cfg, seed=seed)
    ctx = inst.context_space.contexts
    if ctx is None:
        raise ConfigError("iid environments need a context list", "contexts")
    p = cfg.get("probabilities")
    p = np.full(ctx.shape[0], 1.0 / ctx.shape[0]) if p is None else np.asarray(p, float)
    try:
        proc = make_iid(ctx, p)
    except ConfigError:
        raise ConfigError(f"probabilities sum to {np.sum(p):.15g}, not 1", "probabilities") from None
    return Environment("iid", inst, proc, params=dict(cfg))


def _reference(cfg, seed):
    return make_reference_instance(**_params(cfg, ("sigma2", "probabilities", "theta", "delay")))


def _counterexample(cfg, seed):
    return make_counterexample_instance(**_params(cfg, ("horizon", "delay")))


def _latent(cfg, seed):
    return make_latent_confounder_instance(**_params(cfg, (
        "horizon", "arm_variance", "eps_variance", "kappa", "shared", "n_arms", "sigma2",
        "idio_variance", "delay", "max_horizon")))


def _day_of_week(cfg, seed):
    return make_day_of_week_instance(**_params(cfg, (
        "m", "days", "n_arms", "prior_variance", "sigma2", "delay")))


def _mainstream(cfg, seed):
    return make_mainstream_instance(**_params(cfg, ("grid_size",)))


def _params(cfg, allowed):
    extra = set(cfg) - set(allowed) - {"generator", "name"}
    if extra:
        raise ConfigError(f"unknown parameters {sorted(extra)}", "environment")
    return {key: cfg[key] for key in allowed if key in cfg}


_BUILDERS = {
    "iid": _iid_environment,
    "reference": _reference,
    "counterexample": _counterexample,
    "latent-confounder": _latent,
    "day-of-week": _day_of_week,
    "mainstream": _mainstream,
}
ENVIRONMENT_NAMES = tuple(_BUILDERS)


def build_environment(config: Mapping[str, Any], seed: Optional[int] = None):
    """Build an environment from ``{"generator": name, **params}``.

    A mapping without ``generator`` is read as an ``iid`` environment over
    the instance's listed contexts.
    """
    config = dict(config)
    name = config.get("generator", "iid")
    if name not in _BUILDERS:
        raise ConfigError(f"unknown environment {name!r}; choose from {', '.join(ENVIRONMENT_NAMES)}",
                          "generator")
    try:
        return _BUILDERS[name](config, seed)
    except TypeError as exc:  # pragma: no cover - defensive
        raise ConfigError(str(exc), "environment") from None
