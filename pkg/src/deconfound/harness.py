"""Episodes, Monte Carlo studies and the metrics reported on them.

Replications are grouped into fixed batches (by replication index, not
by worker) and the batches are distributed with :mod:`joblib`. Results
are gathered in replication order, so summaries and output files do not
depend on the degree of parallelism.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .allocation import AllocationSolution, gamma_inverse_at
from .engine import RepResult, RunSpec, simulate
from .environments import Environment
from .posterior import log_one_minus_alpha, log_one_minus_alpha_bound, log_optimal_arm_probabilities
from .stopping import StoppingConfig

__all__ = [
    "RunTrace",
    "RunSummary",
    "run_episode",
    "monte_carlo",
    "run_replications",
    "summarize",
    "info_measure_V",
    "iota",
    "prop1_bound",
    "posterior_entropy",
    "exponent",
    "convergence_diagnostics",
    "cost_sweep",
    "trace_columns",
    "write_trace_csv",
    "write_table_csv",
    "write_json",
    "build_id",
    "SCHEMA_VERSION",
    "SEED_DERIVATION",
]

SCHEMA_VERSION = "1"
SEED_DERIVATION = ("replication r, purpose p: numpy SeedSequence(base_seed, "
                   "spawn_key=(r, code[p])) feeding PCG64")
Z95 = 1.959963984540054


# ---------------------------------------------------------------------------
# single episodes


@dataclass
class RunTrace:
    """Per-period record of one episode.

    Attributes
    ----------
    records : dict of ndarray
        Columns ``t, context, arm, reward, beta, top_one, top_two, coin,
        draws, fallback, zmin`` plus ``m`` and ``s2`` (shape (n, k)), the
        posterior summaries the period's decision was based on.
    checkpoints : list of dict
        Posterior summaries after selected periods, with ``alpha``.
    tau : int
        Number of periods run.
    stop_reason : {"threshold", "cap", None}
    selected : int
        Final selection on the full-information posterior.
    regret : float
    best_arm : int
    """

    records: Dict[str, np.ndarray]
    checkpoints: List[dict]
    tau: int
    stop_reason: Optional[str]
    selected: int
    regret: float
    best_arm: int
    theta: np.ndarray
    seed: int = 0

    def __len__(self):
        return int(self.records["t"].size)

    @classmethod
    def from_result(cls, res: RepResult, seed: int) -> "RunTrace":
        cps = []
        for ck in res.checkpoints:
            ck = dict(ck)
            ck["alpha"] = np.exp(log_optimal_arm_probabilities(ck["m"], ck["s2"]))
            cps.append(ck)
        return cls(res.trace or {}, cps, res.tau, res.stop_reason, res.selected, res.regret,
                   res.best_arm, res.theta, seed)

    def rows(self):
        """Rows in :func:`trace_columns` order."""
        rec = self.records
        for i in range(len(self)):
            yield ([int(rec["t"][i]), int(rec["context"][i]), int(rec["arm"][i]),
                    float(rec["reward"][i]), float(rec["beta"][i]), int(rec["top_one"][i]),
                    int(rec["top_two"][i]), int(rec["coin"][i]), int(rec["draws"][i]),
                    int(rec["fallback"][i]), float(rec["zmin"][i])]
                   + [float(v) for v in rec["m"][i]] + [float(v) for v in rec["s2"][i]])


def run_episode(environment: Environment, policy, *, horizon: Optional[int] = None,
                stopping: Optional[StoppingConfig] = None, seed: int = 0,
                truth: str = "fixed", checkpoints: Optional[Sequence[int]] = None) -> RunTrace:
    """Run one episode and keep its full trace.

    Exactly one of ``horizon`` and ``stopping`` must be given. The
    coin-bias mode is part of the policy (``DTS(beta="plugin")``).

    Examples
    --------
    >>> from deconfound.environments import make_reference_instance
    >>> from deconfound.policies import Uniform
    >>> tr = run_episode(make_reference_instance(), Uniform(), horizon=10, seed=3)
    >>> len(tr)
    10
    """
    spec = RunSpec(environment, policy, horizon=horizon, stopping=stopping, truth=truth,
                   checkpoints=checkpoints)
    res = simulate(spec, [0], seed, trace_reps=[0])[0]
    return RunTrace.from_result(res, seed)


# ---------------------------------------------------------------------------
# Monte Carlo


def _mean_ci(x) -> dict:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        return {"mean": None, "ci": None, "n": 0}
    mean = float(np.mean(x))
    half = float(Z95 * np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return {"mean": mean, "ci": half, "n": int(n)}


def exponent(m, s2, arm: int, t: int) -> tuple:
    """``-(1/t) log(1 - alpha_arm)`` and whether the quadrature was used.

    When ``1 - alpha`` is below what the quadrature resolves, the bound
    ``max_j Phi(-Z_{arm,j}) <= 1 - alpha`` is used instead, which
    overstates ``log(1 - alpha)`` and so understates the exponent.
    """
    val = log_one_minus_alpha(m, s2, arm)
    if np.isfinite(val):
        return -val / t, True
    return -log_one_minus_alpha_bound(m, s2, arm) / t, False


def posterior_entropy(m, s2) -> float:
    """Entropy of the posterior distribution of the best arm, in nats."""
    la = log_optimal_arm_probabilities(m, s2)
    a = np.exp(la)
    return float(-np.sum(np.where(a > 0, a * la, 0.0)))


@dataclass
class RunSummary:
    """Aggregates over replications.

    Attributes
    ----------
    n_reps : int
    base_seed : int
    metrics : dict
        ``name -> {"mean", "ci", "n"}`` with 95% normal-approximation
        half-widths.
    checkpoints : list of dict
        Per checkpoint: mean selection proportions ``p`` (with CIs) and,
        when requested, the mean exponent.
    bounds : dict
    cap_hits : int
    """

    n_reps: int
    base_seed: int
    metrics: Dict[str, dict]
    checkpoints: List[dict] = field(default_factory=list)
    bounds: Dict[str, Any] = field(default_factory=dict)
    cap_hits: int = 0
    results: List[RepResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "n_reps": self.n_reps,
            "base_seed": self.base_seed,
            "seed_derivation": SEED_DERIVATION,
            "metrics": self.metrics,
            "checkpoints": self.checkpoints,
            "bounds": self.bounds,
            "cap_hits": self.cap_hits,
        }

    def rep_rows(self):
        """One row per replication: rep, tau, stop_reason, best, selected, regret, counts."""
        for r in self.results:
            yield [r.rep, r.tau, r.stop_reason or "", r.best_arm, r.selected,
                   r.regret] + [int(c) for c in r.counts]


def summarize(results: List[RepResult], base_seed: int, *, cost: Optional[float] = None,
              exponents: bool = False, p_star=None) -> RunSummary:
    """Aggregate replication results.

    Parameters
    ----------
    results : list of RepResult
        In replication order.
    base_seed : int
    cost : float, optional
        Per-period cost ``c``; adds ``cost`` (``c tau + Delta``) and
        ``normalized_cost`` (divided by ``c log(1/c)``).
    exponents : bool
        Compute ``-(1/t) log(1 - alpha_{t,I*})`` at every checkpoint.
    p_star : array_like, optional
        Adds the mean ``|p_{t,i} - p*_i|`` at every checkpoint.
    """
    regret = [r.regret for r in results]
    tau = [r.tau for r in results]
    metrics = {
        "regret": _mean_ci(regret),
        "tau": _mean_ci(tau),
        "correct": _mean_ci([r.selected == r.best_arm for r in results]),
        "resample_draws": _mean_ci([r.draws_total for r in results]),
        "fallbacks": _mean_ci([r.fallback_count for r in results]),
    }
    if cost is not None:
        cc = [cost * t + d for t, d in zip(tau, regret)]
        metrics["cost"] = _mean_ci(cc)
        metrics["normalized_cost"] = _mean_ci(np.asarray(cc) / (cost * math.log(1.0 / cost)))
    by_t: Dict[int, list] = {}
    for r in results:
        for ck in r.checkpoints:
            by_t.setdefault(ck["t"], []).append((r, ck))
    rows = []
    for t in sorted(by_t):
        items = by_t[t]
        P = np.array([ck["counts"] / t for _, ck in items])
        row = {"t": t, "n": len(items),
               "p": P.mean(axis=0).tolist(),
               "p_ci": (Z95 * P.std(axis=0, ddof=1) / np.sqrt(len(items))).tolist()
               if len(items) > 1 else [0.0] * P.shape[1]}
        if p_star is not None:
            dev = np.abs(P - np.asarray(p_star)[None, :])
            row["abs_dev"] = dev.mean(axis=0).tolist()
        if exponents:
            vals, exact = zip(*(exponent(ck["m"], ck["s2"], r.best_arm, t) for r, ck in items))
            ex = _mean_ci(vals)
            row["exponent"] = ex["mean"]
            row["exponent_ci"] = ex["ci"]
            row["exponent_bound_used"] = int(len(exact) - sum(exact))
        rows.append(row)
    cap = sum(1 for r in results if r.stop_reason == "cap")
    return RunSummary(len(results), int(base_seed), metrics, rows, {}, cap, list(results))


def _run_batch(spec, reps, base_seed, trace_reps):
    return simulate(spec, reps, base_seed, trace_reps)


def resolve_parallelism(parallelism: Optional[int]) -> int:
    """``parallelism`` or ``$DECONFOUND_PARALLELISM`` or 1."""
    if parallelism is None:
        parallelism = int(os.environ.get("DECONFOUND_PARALLELISM", "1"))
    if parallelism == 0 or parallelism < -1:
        raise ValueError("parallelism must be positive or -1")
    return int(parallelism)


def run_replications(spec: RunSpec, n_reps: int, base_seed: int,
                     parallelism: Optional[int] = None,
                     trace_reps: Sequence[int] = ()) -> List[RepResult]:
    """Simulate replications ``0..n_reps-1`` and return them in order."""
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    B = max(1, int(spec.batch_size))
    batches = [list(range(i, min(i + B, n_reps))) for i in range(0, n_reps, B)]
    jobs = resolve_parallelism(parallelism)
    if jobs == 1 or len(batches) == 1:
        out = [_run_batch(spec, b, base_seed, trace_reps) for b in batches]
    else:
        out = Parallel(n_jobs=jobs)(delayed(_run_batch)(spec, b, base_seed, trace_reps)
                                    for b in batches)
    return [r for batch in out for r in batch]


def monte_carlo(spec: RunSpec, n_reps: int, base_seed: int, parallelism: Optional[int] = None,
                *, cost: Optional[float] = None, exponents: bool = False, p_star=None,
                trace_reps: Sequence[int] = ()) -> RunSummary:
    """Run ``n_reps`` replications and summarise them.

    Replication ``r`` draws every random number from streams derived
    from ``(base_seed, r)``; see :data:`SEED_DERIVATION`.
    """
    results = run_replications(spec, n_reps, base_seed, parallelism, trace_reps)
    return summarize(results, base_seed, cost=cost, exponents=exponents, p_star=p_star)


# ---------------------------------------------------------------------------
# information bounds


def info_measure_V(contexts, Sigma1, sigma2: float, x_pop) -> float:
    """``x_pop' (Sigma1^-1 + sigma^-2 sum_t x_t x_t')^-1 x_pop``.

    Posterior variance of one arm's population mean if that arm were
    observed in every listed context.

    Examples
    --------
    >>> info_measure_V([[1.0]] * 4, [[1.0]], 1.0, [1.0])
    0.2
    """
    S = np.atleast_2d(np.asarray(Sigma1, dtype=float))
    x_pop = np.asarray(x_pop, dtype=float).ravel()
    X = np.asarray(contexts, dtype=float).reshape(-1, S.shape[0])
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    prec = np.linalg.inv(S) + X.T @ X / sigma2
    return float(x_pop @ np.linalg.solve(prec, x_pop))


def iota(d: int, T: int, Sigma1) -> float:
    """``max(9 log(d lmax(S) (lmax(S^-1) + T)) lmax(S), 9)``."""
    w = np.linalg.eigvalsh(np.atleast_2d(np.asarray(Sigma1, dtype=float)))
    lmax, lmax_inv = float(w.max()), float(1.0 / w.min())
    return max(9.0 * math.log(d * lmax * (lmax_inv + T)) * lmax, 9.0)


def prop1_bound(k: int, d: int, T: int, Sigma1, V: float, entropy="logk") -> float:
    """Upper bound ``sqrt(2 iota k H V)`` on expected simple regret.

    Parameters
    ----------
    entropy : "logk" or float
        ``H``: ``log k`` (the worst case) or a plug-in estimate of the
        posterior entropy of the best arm at the end of the experiment.

    Examples
    --------
    >>> prop1_bound(2, 1, 1, [[1.0]], 0.5, entropy=0.0)
    0.0
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    H = math.log(k) if entropy == "logk" else float(entropy)
    return math.sqrt(2.0 * iota(d, T, Sigma1) * k * H * V)


# ---------------------------------------------------------------------------
# diagnostics and sweeps


def convergence_diagnostics(results: List[RepResult], allocation: AllocationSolution) -> List[dict]:
    """Per checkpoint: mean ``|p_{t,i} - p*_i|`` and the exponent relative to ``Gamma^-1``.

    The exponent is ``-(1/t) log(1 - alpha_{t,I*})`` averaged over
    replications.
    """
    summ = summarize(results, 0, exponents=True, p_star=allocation.p_star)
    rows = []
    for row in summ.checkpoints:
        rows.append({
            "t": row["t"],
            "abs_dev": row["abs_dev"],
            "max_abs_dev": max(row["abs_dev"]),
            "exponent": row["exponent"],
            "exponent_ci": row["exponent_ci"],
            "ratio": row["exponent"] / allocation.gamma_inverse,
            "bound_used": row["exponent_bound_used"],
        })
    return rows


def uniform_exponent(means, scale: float) -> float:
    """Exponent attained by uniform sampling."""
    k = len(means)
    return gamma_inverse_at(np.full(k, 1.0 / k), means, scale)


def cost_sweep(environment: Environment, policy, c_values: Sequence[float], n_reps: int,
               seed: int, *, max_horizon: int = 1_000_000, parallelism: Optional[int] = None,
               gamma: Optional[float] = None) -> List[dict]:
    """Stopping-rule runs at several per-period costs, with ``delta = c``.

    Returns one row per ``c``: mean ``tau``, mean ``Delta_tau``, mean cost
    ``c tau + Delta_tau``, the normalised cost ``cost / (c log(1/c))``,
    the fraction of wrong selections and the number of capped runs.
    """
    if environment.instance.delay != 1:
        raise ValueError("cost sweeps assume no delay beyond one period")
    rows = []
    for c in c_values:
        spec = RunSpec(environment, policy, stopping=StoppingConfig(float(c), max_horizon),
                       checkpoints=())
        summ = monte_carlo(spec, n_reps, seed, parallelism, cost=float(c))
        met = summ.metrics
        row = {
            "c": float(c),
            "tau": met["tau"]["mean"], "tau_ci": met["tau"]["ci"],
            "regret": met["regret"]["mean"], "regret_ci": met["regret"]["ci"],
            "cost": met["cost"]["mean"], "cost_ci": met["cost"]["ci"],
            "normalized_cost": met["normalized_cost"]["mean"],
            "normalized_cost_ci": met["normalized_cost"]["ci"],
            "error_rate": 1.0 - met["correct"]["mean"],
            "cap_hits": summ.cap_hits,
            "n_reps": n_reps,
        }
        if gamma is not None:
            row["gamma"] = gamma
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# output


def trace_columns(k: int) -> List[str]:
    """Column order of the per-period CSV for ``k`` arms."""
    return (["t", "context", "arm", "reward", "beta", "top_one", "top_two", "coin",
             "draws", "fallback", "zmin"]
            + [f"m_{i}" for i in range(k)] + [f"s2_{i}" for i in range(k)])


TRACE_SCHEMA = {
    "version": SCHEMA_VERSION,
    "columns": {
        "t": "period, starting at 1",
        "context": "index of the period's context in the instance's context list",
        "arm": "arm played (0-based)",
        "reward": "observed reward",
        "beta": "coin bias used by DTS (empty for other policies)",
        "top_one": "leader (equals arm for single-draw policies)",
        "top_two": "challenger (equals arm for single-draw policies)",
        "coin": "1 if DTS played its leader, 0 if its challenger, -1 otherwise",
        "draws": "posterior redraws spent finding the challenger",
        "fallback": "1 if the challenger came from the Phi(-Z) weights",
        "zmin": "smallest z-score of the leading posterior mean against the others",
        "m_i": "posterior mean of arm i's population mean before the period's decision",
        "s2_i": "posterior variance of arm i's population mean before the period's decision",
    },
}


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def write_trace_csv(trace: RunTrace, path) -> Path:
    path = Path(path)
    k = trace.records["m"].shape[1] if len(trace) else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_columns(k))
        for row in trace.rows():
            w.writerow([_fmt(v) for v in row])
    return path


def write_table_csv(rows: List[dict], path, columns: Optional[List[str]] = None) -> Path:
    """Write a list of flat dicts; list values are expanded to ``name_i`` columns."""
    path = Path(path)
    flat = []
    for row in rows:
        out = {}
        for key, v in row.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                for i, x in enumerate(v):
                    out[f"{key}_{i}"] = x
            else:
                out[key] = v
        flat.append(out)
    if columns is None:
        columns = []
        for row in flat:
            columns.extend(c for c in row if c not in columns)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in flat:
            w.writerow([_fmt(_plain(row.get(c, ""))) for c in columns])
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path) -> Path:
    """Deterministic JSON (sorted keys, non-finite floats as null)."""
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")
    return path


def build_id() -> str:
    """Content hash of the package sources (40 hex digits, git-style)."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
