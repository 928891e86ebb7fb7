"""Experiment instances for Gaussian linear contextual bandits.

An instance bundles the arms, the finite context space, the population
the final decision is made for, a Gaussian prior over the stacked
parameter vector and, for simulation, a ground-truth parameter.

The parameter is stored arm-major: block ``i`` of the stacked vector
``theta`` (entries ``i*d`` to ``(i+1)*d``) is the per-arm coefficient
vector, so an observation of arm ``i`` in context ``x`` has lifted feature
``e_i kron x``.

Arms are indexed from zero throughout the Python API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

__all__ = [
    "ConfigError",
    "ContextSpace",
    "PopulationSpec",
    "PriorSpec",
    "Instance",
    "build_instance",
    "population_mean",
    "population_means",
    "best_arm",
    "simple_regret",
    "argmax_lowest",
    "check_positive_definite",
]

# Relative eigenvalue floor used to call a covariance positive definite.
PD_RTOL = 1e-10


class ConfigError(ValueError):
    """Raised when an instance description is invalid.

    Parameters
    ----------
    message : str
        Human readable description.
    field : str, optional
        Dotted name of the offending configuration field.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


def argmax_lowest(values, axis=-1):
    """Argmax with ties broken toward the lowest index.

    ``np.argmax`` already returns the first maximal entry, this wrapper
    exists to make the tie rule explicit at call sites.
    """
    return np.argmax(np.asarray(values), axis=axis)


def check_positive_definite(cov, field="prior.covariance"):
    """Validate that ``cov`` is symmetric positive definite.

    The matrix is accepted when its smallest eigenvalue exceeds
    ``1e-10`` times its largest.

    Raises
    ------
    ConfigError
        If the matrix is not square, not symmetric or not positive definite.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {cov.shape}", field)
    if not np.all(np.isfinite(cov)):
        raise ConfigError("matrix has non-finite entries", field)
    scale = max(np.max(np.abs(cov)), 1e-300)
    if np.max(np.abs(cov - cov.T)) > 1e-10 * scale:
        raise ConfigError("matrix is not symmetric", field)
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eig[-1] <= 0 or eig[0] <= PD_RTOL * eig[-1]:
        raise ConfigError(
            f"prior covariance not positive definite (eigenvalues in "
            f"[{eig[0]:.3g}, {eig[-1]:.3g}])",
            field,
        )
    return cov


@dataclass(frozen=True)
class ContextSpace:
    """Finite set of context vectors in ``R^d``.

    Parameters
    ----------
    dimension : int
        Context dimension ``d``.
    contexts : ndarray of shape (n_contexts, d), optional
        Listed contexts. May be omitted when contexts are supplied on the
        fly together with an explicit population vector.
    norm_bound : float, optional
        Asserted bound on the Euclidean norm of every context. Defaults
        to the largest listed norm (or 1 when nothing is listed).
    """

    dimension: int
    contexts: Optional[np.ndarray] = None
    norm_bound: Optional[float] = None

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise ConfigError("dimension must be at least 1", "d")
        object.__setattr__(self, "dimension", int(self.dimension))
        if self.contexts is not None:
            ctx = np.atleast_2d(np.asarray(self.contexts, dtype=float))
            if ctx.shape[1] != self.dimension:
                raise ConfigError(
                    f"contexts have dimension {ctx.shape[1]}, expected {self.dimension}",
                    "contexts",
                )
            ctx.setflags(write=False)
            object.__setattr__(self, "contexts", ctx)
        norms = (
            np.linalg.norm(self.contexts, axis=1)
            if self.contexts is not None
            else np.zeros(0)
        )
        if self.norm_bound is None:
            bound = float(norms.max()) if norms.size else 1.0
            object.__setattr__(self, "norm_bound", max(bound, np.finfo(float).tiny))
        elif self.norm_bound <= 0:
            raise ConfigError("norm_bound must be positive", "norm_bound")
        elif norms.size and norms.max() > self.norm_bound * (1 + 1e-12):
            raise ConfigError(
                f"context norm {norms.max():.6g} exceeds norm_bound {self.norm_bound}",
                "contexts",
            )

    @property
    def n_contexts(self) -> int:
        return 0 if self.contexts is None else self.contexts.shape[0]

    @property
    def is_basis(self) -> bool:
        """True when every listed context is a standard basis vector."""
        if self.contexts is None:
            return False
        ctx = self.contexts
        return bool(np.all((ctx == 0.0) | (ctx == 1.0)) and np.all(ctx.sum(axis=1) == 1.0))

    def basis_coordinates(self) -> np.ndarray:
        """Coordinate index of each basis context (requires ``is_basis``)."""
        if not self.is_basis:
            raise ValueError("contexts are not standard basis vectors")
        return np.argmax(self.contexts, axis=1)


@dataclass(frozen=True)
class PopulationSpec:
    """Population the final decision is evaluated on.

    Parameters
    ----------
    x_pop : ndarray of shape (d,)
        Average context under the population distribution.
    weights : ndarray of shape (n_contexts,), optional
        Population weights over the listed contexts, when given.
    """

    x_pop: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x_pop, dtype=float).ravel()
        if not np.all(np.isfinite(x)):
            raise ConfigError("x_pop has non-finite entries", "population.x_pop")
        x.setflags(write=False)
        object.__setattr__(self, "x_pop", x)

    @classmethod
    def from_weights(cls, contexts, weights) -> "PopulationSpec":
        """Population vector ``sum_x w(x) x`` from weights over contexts."""
        contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        w = _validate_probabilities(weights, "population.weights")
        if w.shape[0] != contexts.shape[0]:
            raise ConfigError(
                f"{w.shape[0]} weights for {contexts.shape[0]} contexts",
                "population.weights",
            )
        return cls(x_pop=w @ contexts, weights=w)

    @classmethod
    def from_vector(cls, x_pop) -> "PopulationSpec":
        return cls(x_pop=np.asarray(x_pop, dtype=float))


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior over the stacked parameter, plus the noise variance.

    The prior is always held in expanded (joint) form. ``mode`` records how
    it was specified: ``"independent-arms"`` priors are block diagonal,
    ``"joint"`` priors may couple arms.

    Parameters
    ----------
    mode : {"independent-arms", "joint"}
    mean : ndarray of shape (d*k,)
    covariance : ndarray of shape (d*k, d*k)
    noise_variance : float
        Reward noise variance ``sigma^2`` (zero allowed, see the posterior
        engine for the restrictions that apply).
    n_arms, dimension : int
    """

    mode: str
    mean: np.ndarray
    covariance: np.ndarray
    noise_variance: float
    n_arms: int
    dimension: int

    def __post_init__(self):
        if self.mode not in ("independent-arms", "joint"):
            raise ConfigError(f"unknown prior mode {self.mode!r}", "prior.mode")
        D = self.n_arms * self.dimension
        mean = np.asarray(self.mean, dtype=float).ravel()
        if mean.shape != (D,):
            raise ConfigError(f"prior mean has length {mean.size}, expected {D}", "prior.means")
        cov = check_positive_definite(self.covariance)
        if cov.shape != (D, D):
            raise ConfigError(f"prior covariance has shape {cov.shape}, expected ({D}, {D})",
                              "prior.covariance")
        if not np.isfinite(self.noise_variance) or self.noise_variance < 0:
            raise ConfigError("noise variance must be a nonnegative real", "sigma2")
        cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @classmethod
    def independent(cls, means, covariance, noise_variance) -> "PriorSpec":
        """Block-diagonal prior from per-arm means and covariance(s).

        Parameters
        ----------
        means : array_like of shape (k, d)
        covariance : array_like of shape (d, d) or (k, d, d)
            Shared covariance, or one covariance per arm.
        noise_variance : float
        """
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k, d = means.shape
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 2:
            blocks = [cov] * k
        elif cov.ndim == 3 and cov.shape[0] == k:
            blocks = list(cov)
        else:
            raise ConfigError(f"covariance of shape {cov.shape} does not fit k={k}, d={d}",
                              "prior.covariance")
        for i, b in enumerate(blocks):
            if b.shape != (d, d):
                raise ConfigError(f"arm {i} covariance has shape {b.shape}, expected ({d}, {d})",
                                  "prior.covariance")
            check_positive_definite(b, f"prior.covariance[{i}]")
        joint = np.zeros((k * d, k * d))
        for i, b in enumerate(blocks):
            joint[i * d:(i + 1) * d, i * d:(i + 1) * d] = b
        return cls("independent-arms", means.ravel(), joint, noise_variance, k, d)

    @classmethod
    def joint(cls, mean, covariance, noise_variance, n_arms, dimension) -> "PriorSpec":
        return cls("joint", mean, covariance, noise_variance, int(n_arms), int(dimension))

    @property
    def arm_means(self) -> np.ndarray:
        """Per-arm prior means, shape (k, d)."""
        return self.mean.reshape(self.n_arms, self.dimension)

    def arm_covariance(self, i: int) -> np.ndarray:
        d = self.dimension
        return self.covariance[i * d:(i + 1) * d, i * d:(i + 1) * d]

    @property
    def shared_arm_covariance(self) -> Optional[np.ndarray]:
        """The common per-arm covariance when all blocks agree, else None."""
        first = self.arm_covariance(0)
        for i in range(1, self.n_arms):
            if not np.array_equal(self.arm_covariance(i), first):
                return None
        return first

    @property
    def has_cross_arm_covariance(self) -> bool:
        d = self.dimension
        cov = self.covariance
        mask = np.kron(np.eye(self.n_arms), np.ones((d, d))) == 0
        return bool(np.any(cov[mask] != 0.0))


@dataclass(frozen=True)
class Instance:
    """A Gaussian linear contextual bandit instance.

    Parameters
    ----------
    n_arms : int
        Number of arms ``k >= 2`` (``k = 1`` is accepted for plumbing tests).
    context_space : ContextSpace
    population : PopulationSpec
    prior : PriorSpec
    theta : ndarray of shape (d*k,), optional
        Ground truth. Absent for belief-only instances.
    delay : int
        Reward delay ``L >= 1``; a reward from period ``l`` is usable from
        period ``l + L`` on.
    name : str
        Free-form label carried into outputs.
    """

    n_arms: int
    context_space: ContextSpace
    population: PopulationSpec
    prior: PriorSpec
    theta: Optional[np.ndarray] = None
    delay: int = 1
    name: str = ""
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        k, d = int(self.n_arms), self.context_space.dimension
        if k < 1:
            raise ConfigError("number of arms must be positive", "k")
        if self.population.x_pop.shape != (d,):
            raise ConfigError(
                f"x_pop has length {self.population.x_pop.size}, expected {d}", "population"
            )
        if self.prior.n_arms != k or self.prior.dimension != d:
            raise ConfigError("prior dimensions do not match (k, d)", "prior")
        if int(self.delay) < 1:
            raise ConfigError("delay must be at least 1", "delay")
        object.__setattr__(self, "delay", int(self.delay))
        if self.prior.noise_variance == 0.0 and self.context_space.contexts is not None \
                and not self.context_space.is_basis:
            raise ConfigError("zero noise variance needs standard-basis contexts", "sigma2")
        if self.theta is not None:
            th = np.asarray(self.theta, dtype=float).ravel()
            if th.shape != (d * k,):
                raise ConfigError(f"theta has length {th.size}, expected {d * k}", "truth.theta")
            th.setflags(write=False)
            object.__setattr__(self, "theta", th)

    @property
    def k(self) -> int:
        return self.n_arms

    @property
    def d(self) -> int:
        return self.context_space.dimension

    @property
    def x_pop(self) -> np.ndarray:
        return self.population.x_pop

    @property
    def sigma2(self) -> float:
        return self.prior.noise_variance

    def with_truth(self, theta) -> "Instance":
        return _replace(self, theta=theta)

    def with_delay(self, delay: int) -> "Instance":
        return _replace(self, delay=delay)

    def population_means(self, theta=None) -> np.ndarray:
        """Population mean of every arm under ``theta`` (default: the truth)."""
        theta = self._truth(theta)
        return population_means(theta, self.population, self.n_arms)

    def best_arm(self, theta=None) -> int:
        return best_arm(self._truth(theta), self.population, self.n_arms)

    def simple_regret(self, chosen: int, theta=None) -> float:
        return simple_regret(self._truth(theta), chosen, self.population, self.n_arms)

    def _truth(self, theta):
        if theta is None:
            if self.theta is None:
                raise ValueError("instance has no ground truth")
            return self.theta
        return np.asarray(theta, dtype=float)


def _replace(inst: Instance, **changes) -> Instance:
    from dataclasses import replace

    return replace(inst, **changes)


def _validate_probabilities(p, field):
    p = np.asarray(p, dtype=float).ravel()
    if p.size == 0 or np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ConfigError("weights must be finite and nonnegative", field)
    total = p.sum()
    if abs(total - 1.0) > 1e-12:
        raise ConfigError(f"weights sum to {total:.15g}, not 1", field)
    return p


def _arm_block(theta, i, n_arms):
    theta = np.asarray(theta, dtype=float).ravel()
    if not 0 <= i < n_arms:
        raise IndexError(f"arm index {i} out of range for {n_arms} arms")
    d = theta.size // n_arms
    return theta[i * d:(i + 1) * d]


def population_mean(theta, i: int, population: PopulationSpec, n_arms: Optional[int] = None) -> float:
    """Population mean reward ``<theta^(i), x_pop>`` of arm ``i``.

    Parameters
    ----------
    theta : array_like of shape (d*k,)
        Stacked parameter.
    i : int
        Arm index (zero based).
    population : PopulationSpec
    n_arms : int, optional
        Number of arms; inferred from ``len(theta) / d`` when omitted.
    """
    x = population.x_pop
    theta = np.asarray(theta, dtype=float).ravel()
    if n_arms is None:
        n_arms = theta.size // x.size
    return float(_arm_block(theta, i, n_arms) @ x)


def population_means(theta, population: PopulationSpec, n_arms: Optional[int] = None) -> np.ndarray:
    """Population means of all arms, shape (k,)."""
    x = population.x_pop
    theta = np.asarray(theta, dtype=float).ravel()
    if n_arms is None:
        n_arms = theta.size // x.size
    return theta.reshape(n_arms, -1) @ x


def best_arm(theta, population: PopulationSpec, n_arms: Optional[int] = None) -> int:
    """Arm with the largest population mean (lowest index on ties)."""
    return int(argmax_lowest(population_means(theta, population, n_arms)))


def simple_regret(theta, chosen: int, population: PopulationSpec, n_arms: Optional[int] = None) -> float:
    """Shortfall of ``chosen`` relative to the best arm's population mean."""
    mu = population_means(theta, population, n_arms)
    if not 0 <= chosen < mu.size:
        raise IndexError(f"arm index {chosen} out of range for {mu.size} arms")
    return float(mu.max() - mu[chosen])


# ---------------------------------------------------------------------------
# configuration parsing


def _get(config, key, field=None, default=...):
    if key in config:
        return config[key]
    if default is ...:
        raise ConfigError("missing required field", field or key)
    return default


def _as_array(value, field, ndim=None):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not numeric ({exc})", field) from None
    if ndim is not None and arr.ndim != ndim:
        raise ConfigError(f"expected {ndim}-dimensional array, got shape {arr.shape}", field)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("non-finite entries", field)
    return arr


def _parse_prior(cfg, k, d, sigma2) -> PriorSpec:
    mode = cfg.get("mode", "independent-arms")
    if mode == "independent-arms":
        means = cfg.get("means", cfg.get("mean", 0.0))
        means = _as_array(means, "prior.means")
        if means.ndim == 0:
            means = np.full((k, d), float(means))
        elif means.ndim == 1:
            if means.size != d:
                raise ConfigError(f"mean vector has length {means.size}, expected {d}", "prior.means")
            means = np.tile(means, (k, 1))
        if means.shape != (k, d):
            raise ConfigError(f"means have shape {means.shape}, expected ({k}, {d})", "prior.means")
        cov = _as_array(cfg.get("covariance", 1.0), "prior.covariance")
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        elif cov.ndim == 1:
            # per-arm isotropic variances
            if cov.size != k:
                raise ConfigError("a covariance vector must list one variance per arm",
                                  "prior.covariance")
            cov = np.stack([v * np.eye(d) for v in cov])
        return PriorSpec.independent(means, cov, sigma2)
    if mode == "joint":
        D = k * d
        mean = _as_array(cfg.get("mean", 0.0), "prior.mean")
        if mean.ndim == 0:
            mean = np.full(D, float(mean))
        cov = _as_array(_get(cfg, "covariance", "prior.covariance"), "prior.covariance", ndim=2)
        return PriorSpec.joint(mean, cov, sigma2, k, d)
    raise ConfigError(f"unknown prior mode {mode!r}", "prior.mode")


def build_instance(config: Mapping[str, Any], seed: Optional[int] = None) -> Instance:
    """Build and validate an :class:`Instance` from a nested mapping.

    Recognised keys are ``k``, ``d``, ``contexts`` (list of vectors),
    ``norm_bound``, ``prior`` (``mode``, ``means``/``mean``,
    ``covariance``), ``sigma2``, ``delay``, ``population`` (``weights`` or
    ``x_pop``) and ``truth`` (``theta`` or ``seed``). A ``generator``
    entry naming one of the environment families builds that family
    instead, with the remaining keys as its parameters.

    Parameters
    ----------
    config : mapping
        JSON-compatible description.
    seed : int, optional
        Overrides ``truth.seed`` when the truth is drawn from the prior.

    Returns
    -------
    Instance

    Raises
    ------
    ConfigError
        With the dotted name of the offending field.
    """
    if not isinstance(config, Mapping):
        raise ConfigError("instance description must be a mapping", "instance")
    if "generator" in config:
        from .environments import build_environment

        return build_environment(config, seed=seed).instance

    k = int(_get(config, "k"))
    if k < 1:
        raise ConfigError("k must be positive", "k")
    contexts = config.get("contexts")
    if contexts is not None:
        contexts = _as_array(contexts, "contexts", ndim=2)
    if "d" in config:
        d = int(config["d"])
    elif contexts is not None:
        d = contexts.shape[1]
    else:
        raise ConfigError("missing required field", "d")
    space = ContextSpace(d, contexts, config.get("norm_bound"))

    pop_cfg = config.get("population", {"uniform": True})
    if "x_pop" in pop_cfg:
        x_pop = _as_array(pop_cfg["x_pop"], "population.x_pop", ndim=1)
        if x_pop.size != d:
            raise ConfigError(f"x_pop has length {x_pop.size}, expected {d}", "population.x_pop")
        population = PopulationSpec.from_vector(x_pop)
    else:
        if space.contexts is None:
            raise ConfigError("weights need a context list; give x_pop instead", "population")
        n = space.n_contexts
        w = pop_cfg.get("weights")
        w = np.full(n, 1.0 / n) if w is None else _as_array(w, "population.weights", ndim=1)
        population = PopulationSpec.from_weights(space.contexts, w)

    sigma2 = float(config.get("sigma2", 1.0))
    if not np.isfinite(sigma2) or sigma2 < 0:
        raise ConfigError("must be a nonnegative real", "sigma2")
    prior = _parse_prior(config.get("prior", {}), k, d, sigma2)

    theta = None
    truth = config.get("truth")
    if truth is not None:
        if "theta" in truth:
            theta = _as_array(truth["theta"], "truth.theta").ravel()
            if theta.size != d * k:
                raise ConfigError(f"theta has length {theta.size}, expected {d * k}", "truth.theta")
        else:
            s = seed if seed is not None else truth.get("seed")
            if s is None:
                raise ConfigError("give either theta or seed", "truth")
            rng = np.random.default_rng(s)
            theta = rng.multivariate_normal(prior.mean, prior.covariance, method="cholesky")
    delay = int(config.get("delay", 1))
    if delay < 1:
        raise ConfigError("delay must be at least 1", "delay")
    return Instance(k, space, population, prior, theta, delay, name=str(config.get("name", "")))
