"""Deconfounded Thompson sampling for population-level decisions.

Simulation library for Gaussian linear contextual bandit experiments in
which the goal is to pick the arm that is best on average over a target
population of contexts, while the contexts seen during the experiment
may drift, cycle or be sampled off-population.
"""

from .allocation import (
    AllocationSolution,
    gamma_inverse_at,
    solve_beta,
    solve_p_star,
    verify_equilibrium,
)
from .environments import build_environment
from .model import ConfigError, Instance, build_instance
from .policies import (
    DTS,
    ContextualTS,
    DeconfoundedUCB,
    NaiveTS,
    Uniform,
    dts_select,
    make_policy,
)
from .posterior import GaussianPosterior, init_posterior, optimal_arm_probabilities
from .stopping import StoppingConfig, bayes_select, should_stop, threshold

__version__ = "0.1.0"

__all__ = [
    "AllocationSolution",
    "ConfigError",
    "ContextualTS",
    "DTS",
    "DeconfoundedUCB",
    "GaussianPosterior",
    "Instance",
    "NaiveTS",
    "StoppingConfig",
    "Uniform",
    "bayes_select",
    "build_environment",
    "build_instance",
    "dts_select",
    "gamma_inverse_at",
    "init_posterior",
    "make_policy",
    "optimal_arm_probabilities",
    "should_stop",
    "solve_beta",
    "solve_p_star",
    "threshold",
    "verify_equilibrium",
]
