"""Batched simulation of many independent replications.

Replications of one experiment share nothing but immutable instance
data, so the engine advances a batch of them in lock step with array
operations: one Python-level iteration per period, whatever the number
of replications.

Reproducibility does not depend on how replications are grouped. Each
replication owns one random stream per purpose (context, arm draws, coin,
noise, ...), seeded from ``(base_seed, replication, purpose)`` and read in
fixed-size blocks at fixed periods, so a replication sees the same
numbers whether it runs alone or in a batch, and whichever worker runs
it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .allocation import solve_beta_batch
from .environments import Environment, MainstreamEnvironment
from .model import argmax_lowest
from .policies import (
    DTS,
    ContextualTS,
    DeconfoundedUCB,
    NaiveTS,
    Uniform,
    _Policy,
    contextual_ts_batch,
    dts_batch,
    thompson_batch,
    ucb_batch,
    uniform_batch,
)
from .posterior import naive_summaries, population_projection
from .stopping import StoppingConfig, stop_statistic, threshold

__all__ = [
    "RunSpec",
    "RepResult",
    "simulate",
    "simulate_mainstream",
    "rep_generator",
    "default_checkpoints",
    "STREAMS",
]

#: purpose codes used in the per-replication seed derivation
STREAMS = {
    "truth": 0,
    "context": 1,
    "select": 2,
    "coin": 3,
    "noise": 4,
    "resample": 5,
    "fallback": 6,
    "extra": 7,
    "theta": 8,
    "uniform": 9,
}
BLOCK = 256
FIRST_BLOCK = 8


def rep_generator(base_seed: int, rep: int, purpose: str) -> np.random.Generator:
    """Generator for one replication and purpose.

    The seed is ``SeedSequence(base_seed, spawn_key=(rep, code))``, which
    gives statistically independent streams for distinct
    ``(rep, purpose)`` pairs.
    """
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(rep), STREAMS[purpose]))
    return np.random.Generator(np.random.PCG64(ss))


def default_checkpoints(horizon: int) -> List[int]:
    """Powers of two up to ``horizon``, plus ``horizon`` itself."""
    pts = [1 << j for j in range(int(np.log2(max(horizon, 1))) + 1)]
    if pts[-1] != horizon:
        pts.append(horizon)
    return pts


class _Stream:
    """Block-buffered stream with fixed consumption of ``width`` values per period."""

    def __init__(self, base_seed, reps, purpose, width, kind="normal"):
        self.gens = [rep_generator(base_seed, r, purpose) for r in reps]
        self.width = int(width)
        self.kind = kind
        self.buf = np.zeros((len(self.gens), BLOCK, self.width))
        self.pos = BLOCK

    def take(self, slots: np.ndarray) -> np.ndarray:
        if self.pos == BLOCK:
            for s in slots:
                g = self.gens[s]
                if self.kind == "normal":
                    self.buf[s] = g.standard_normal((BLOCK, self.width))
                else:
                    self.buf[s] = g.random((BLOCK, self.width))
            self.pos = 0
        out = self.buf[slots, self.pos]
        self.pos += 1
        return out[:, 0] if self.width == 1 else out


@dataclass
class RunSpec:
    """What to simulate.

    Parameters
    ----------
    environment : Environment
    policy : policy estimator
        One of the classes in :mod:`deconfound.policies`.
    horizon : int, optional
        Fixed number of periods. Exactly one of ``horizon`` and
        ``stopping`` must be given.
    stopping : StoppingConfig, optional
    truth : {"fixed", "prior"}
        Use the instance's parameter, or draw one from the environment's
        truth sampler for every replication.
    checkpoints : sequence of int, optional
        Periods at which posterior summaries are stored (default: powers
        of two and the horizon).
    batch_size : int
        Replications advanced together.
    """

    environment: Environment
    policy: _Policy
    horizon: Optional[int] = None
    stopping: Optional[StoppingConfig] = None
    truth: str = "fixed"
    checkpoints: Optional[Sequence[int]] = None
    batch_size: int = 250

    def __post_init__(self):
        if (self.horizon is None) == (self.stopping is None):
            raise ValueError("give exactly one of horizon and stopping")
        if self.horizon is not None and int(self.horizon) < 1:
            raise ValueError("horizon must be positive")
        if self.truth not in ("fixed", "prior"):
            raise ValueError("truth must be 'fixed' or 'prior'")
        if self.truth == "fixed" and self.environment.instance.theta is None:
            raise ValueError("the instance has no parameter; use truth='prior'")
        self.policy.validate()

    @property
    def max_periods(self) -> int:
        return int(self.horizon) if self.horizon is not None else int(self.stopping.max_horizon)

    def checkpoint_set(self) -> List[int]:
        if self.checkpoints is not None:
            return sorted(set(int(c) for c in self.checkpoints))
        return default_checkpoints(self.max_periods)


@dataclass
class RepResult:
    """Outcome of one replication.

    ``m``/``s2`` pairs are posterior means and variances of the population
    means; ``delayed_*`` is the state the final stopping check saw and
    ``final_*`` the full-information state after every pending reward was
    released.
    """

    rep: int
    theta: np.ndarray
    best_arm: int
    selected: int
    leader_delayed: int
    regret: float
    tau: int
    stop_reason: Optional[str]
    counts: np.ndarray
    final_m: np.ndarray
    final_s2: np.ndarray
    delayed_m: np.ndarray
    delayed_s2: np.ndarray
    checkpoints: List[dict] = field(default_factory=list)
    draws_total: int = 0
    fallback_count: int = 0
    trace: Optional[Dict[str, np.ndarray]] = None


class _GaussianBatch:
    """Posterior states of a batch of replications (covariance form)."""

    def __init__(self, instance, n):
        prior = instance.prior
        self.k, self.d = instance.k, instance.d
        self.sigma2 = float(prior.noise_variance)
        self.x_pop = np.asarray(instance.x_pop, dtype=float)
        self.P = population_projection(self.x_pop, self.k)
        self.joint = prior.has_cross_arm_covariance
        self.mean = np.tile(prior.mean, (n, 1))
        self.C = np.tile(prior.covariance, (n, 1, 1))
        self.tol = 1e-14 * max(1.0, float(np.max(np.diag(prior.covariance))))
        self.n_updates = 0
        space = instance.context_space
        self.basis = space.basis_coordinates() if space.is_basis else None
        self.contexts = space.contexts
        self._summaries()

    def _summaries(self):
        self.m = self.mean @ self.P.T
        Q = self.P @ self.C @ self.P.T
        self.Q = Q if self.joint else None
        self.s2 = np.maximum(np.einsum("nii->ni", Q), 0.0)

    def subset(self, keep):
        self.mean = self.mean[keep]
        self.C = self.C[keep]
        self.m = self.m[keep]
        self.s2 = self.s2[keep]
        if self.Q is not None:
            self.Q = self.Q[keep]

    def copy_rows(self, rows):
        new = object.__new__(_GaussianBatch)
        new.__dict__.update(self.__dict__)
        new.mean = self.mean[rows].copy()
        new.C = self.C[rows].copy()
        new.m = self.m[rows].copy()
        new.s2 = self.s2[rows].copy()
        new.Q = None if self.Q is None else self.Q[rows].copy()
        return new

    def update(self, arm, cidx, y):
        n = arm.size
        if n == 0:
            return
        k, d = self.k, self.d
        ar = np.arange(n)
        if self.basis is not None:
            col = arm * d + self.basis[cidx]
            g = self.C[ar, :, col]
            quad = g[ar, col]
            pred = self.mean[ar, col]
        else:
            X = self.contexts[cidx]
            blk = self.C.reshape(n, k * d, k, d)[ar, :, arm, :]
            g = np.einsum("nDd,nd->nD", blk, X)
            quad = np.einsum("nd,nd->n", g.reshape(n, k, d)[ar, arm], X)
            pred = np.einsum("nd,nd->n", self.mean.reshape(n, k, d)[ar, arm], X)
        den = self.sigma2 + quad
        ok = den > self.tol
        w = np.where(ok, 1.0 / np.where(ok, den, 1.0), 0.0)
        gain = w * (y - pred)
        self.mean += g * gain[:, None]
        gw = g * w[:, None]
        self.C -= gw[:, :, None] * g[:, None, :]
        Pg = g.reshape(n, k, d) @ self.x_pop
        self.m += Pg * gain[:, None]
        if self.Q is None:
            self.s2 = np.maximum(self.s2 - Pg * Pg * w[:, None], 0.0)
        else:
            self.Q -= (Pg * w[:, None])[:, :, None] * Pg[:, None, :]
            self.s2 = np.maximum(np.einsum("nii->ni", self.Q), 0.0)
        self.n_updates += 1
        if self.n_updates % 256 == 0:
            self.C = 0.5 * (self.C + np.swapaxes(self.C, 1, 2))
            self._summaries()

    def population_factor(self):
        """Square-root factors of the joint covariance of the population means."""
        Q = 0.5 * (self.Q + np.swapaxes(self.Q, 1, 2))
        w, V = np.linalg.eigh(Q)
        return V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]

    def pair_variance(self):
        dq = np.einsum("nii->ni", self.Q)
        return dq[:, :, None] + dq[:, None, :] - 2.0 * self.Q

    def theta_factor(self):
        C = 0.5 * (self.C + np.swapaxes(self.C, 1, 2))
        try:
            return np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(C)
            return V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]


def _sample_truths(spec: RunSpec, reps, base_seed):
    env = spec.environment
    if spec.truth == "fixed":
        th = np.asarray(env.instance.theta, dtype=float)
        return np.tile(th, (len(reps), 1))
    return np.stack([env.sample_truth(rep_generator(base_seed, r, "truth")) for r in reps])


def _population_means(theta, k, x_pop):
    n = theta.shape[0]
    return theta.reshape(n, k, -1) @ x_pop


def simulate(spec: RunSpec, reps: Sequence[int], base_seed: int,
             trace_reps: Sequence[int] = ()) -> List[RepResult]:
    """Run the replications ``reps`` of ``spec`` and return their results in order.

    Parameters
    ----------
    spec : RunSpec
    reps : sequence of int
        Replication indices (they select the random streams).
    base_seed : int
    trace_reps : sequence of int
        Replications whose per-period records are kept.
    """
    env = spec.environment
    inst, proc = env.instance, env.process
    policy = spec.policy
    k, d = inst.k, inst.d
    D = k * d
    reps = [int(r) for r in reps]
    n0 = len(reps)
    T = spec.max_periods
    if proc.horizon is not None and T > proc.horizon:
        raise ValueError(f"context process has {proc.horizon} periods, run needs {T}")
    L = int(inst.delay)
    sigma = np.sqrt(inst.sigma2)
    x_pop = np.asarray(inst.x_pop, dtype=float)
    checkpoints = set(spec.checkpoint_set())
    trace_set = set(int(r) for r in trace_reps)

    theta_all = _sample_truths(spec, reps, base_seed)
    mu_all = _population_means(theta_all, k, x_pop)
    best_all = argmax_lowest(mu_all, axis=1)

    # random streams
    streams = {"noise": _Stream(base_seed, reps, "noise", 1)}
    if proc.is_random:
        streams["context"] = _Stream(base_seed, reps, "context", 1, "uniform")
    is_dts = isinstance(policy, DTS)
    if is_dts or isinstance(policy, NaiveTS):
        streams["select"] = _Stream(base_seed, reps, "select", k)
    if is_dts:
        streams["coin"] = _Stream(base_seed, reps, "coin", 1, "uniform")
        streams["fallback"] = _Stream(base_seed, reps, "fallback", 1, "uniform")
        if k > 2:
            streams["resample"] = _Stream(base_seed, reps, "resample", FIRST_BLOCK * k)
        extra = [None] * n0
    if isinstance(policy, Uniform):
        streams["uniform"] = _Stream(base_seed, reps, "uniform", 1, "uniform")
    if isinstance(policy, ContextualTS):
        streams["theta"] = _Stream(base_seed, reps, "theta", D)

    # state
    post = _GaussianBatch(inst, n0)
    slots = np.arange(n0)
    theta = theta_all.copy()
    counts = np.zeros((n0, k), dtype=np.int64)
    naive_n = np.zeros((n0, k))
    naive_sum = np.zeros((n0, k))
    ring_arm = np.zeros((L, n0), dtype=np.int64)
    ring_ctx = np.zeros((L, n0), dtype=np.int64)
    ring_y = np.zeros((L, n0))
    beta_prev = np.full(n0, 0.5)
    draws_tot = np.zeros(n0, dtype=np.int64)
    fb_tot = np.zeros(n0, dtype=np.int64)
    results: Dict[int, RepResult] = {}
    ckpts: List[List[dict]] = [[] for _ in range(n0)]
    traces = {s: [] for s in range(n0) if reps[s] in trace_set}
    contexts = proc.contexts
    stopping = spec.stopping

    def finalize(rows, t, reason, leader_delayed):
        """Flush pending rewards for ``rows`` (positions in the active arrays)."""
        sub = post.copy_rows(rows)
        dm, ds2 = post.m[rows].copy(), post.s2[rows].copy()
        for ell in range(max(1, t + 2 - L), t + 1):
            s = ell % L
            sub.update(ring_arm[s, rows], ring_ctx[s, rows], ring_y[s, rows])
        sel = argmax_lowest(sub.m, axis=1)
        for j, r in enumerate(rows):
            slot = int(slots[r])
            mu = mu_all[slot]
            tr = None
            if slot in traces:
                tr = {key: np.array([row[key] for row in traces[slot]])
                      for key in traces[slot][0]} if traces[slot] else {}
            results[slot] = RepResult(
                rep=reps[slot], theta=theta_all[slot], best_arm=int(best_all[slot]),
                selected=int(sel[j]), leader_delayed=int(leader_delayed[j]),
                regret=float(mu.max() - mu[sel[j]]), tau=int(t), stop_reason=reason,
                counts=counts[r].copy(), final_m=sub.m[j].copy(), final_s2=sub.s2[j].copy(),
                delayed_m=dm[j], delayed_s2=ds2[j], checkpoints=ckpts[slot],
                draws_total=int(draws_tot[r]), fallback_count=int(fb_tot[r]), trace=tr)

    for t in range(1, T + 1):
        n = slots.size
        if n == 0:
            break
        ar = np.arange(n)
        # context for this period
        if proc.is_random:
            cidx = proc.index(t, streams["context"].take(slots))
        else:
            cidx = np.full(n, proc.index(t), dtype=np.int64)
        m, s2 = post.m, post.s2
        beta_t = None
        dec_draws = dec_fb = coin = None
        if is_dts:
            beta_t = solve_beta_batch(m, beta_prev) if policy.plugin else np.full(n, float(policy.beta))
            beta_prev = beta_t
            first = streams["select"].take(slots)
            coin_u = streams["coin"].take(slots)
            fb_u = streams["fallback"].take(slots)
            if k > 2:
                block = streams["resample"].take(slots).reshape(n, FIRST_BLOCK, k)
                calls = [0]

                def extra_gen(r):
                    slot = slots[r]
                    if extra[slot] is None:
                        extra[slot] = rep_generator(base_seed, reps[slot], "extra")
                    return extra[slot]

                def resample(rows, b, _block=block, _calls=calls):
                    if _calls[0] == 0:
                        _calls[0] = 1
                        return _block[rows, :b]
                    out = np.empty((rows.size, b, k))
                    for j, r in enumerate(rows):
                        out[j] = extra_gen(r).standard_normal((b, k))
                    return out
            else:
                resample = extra_gen = None
            factor = pair_var = None
            if post.joint:
                factor = post.population_factor()
                pair_var = post.pair_variance()
            dec = dts_batch(m, s2, beta_t, first, coin_u, fb_u, resample,
                            int(policy.max_resamples), factor=factor, pair_var=pair_var,
                            exhaustion_tol=float(policy.exhaustion_tol), first_block=FIRST_BLOCK,
                            rng_for=extra_gen)
            coin, dec_draws, dec_fb = dec.coin, dec.draws, dec.fallback
            draws_tot += dec_draws
            fb_tot += dec_fb
        elif isinstance(policy, Uniform):
            dec = uniform_batch(k, streams["uniform"].take(slots))
        elif isinstance(policy, NaiveTS):
            nm, ns2 = naive_summaries(naive_n, naive_sum, inst.sigma2, policy.prior_variance)
            dec = thompson_batch(nm, ns2, streams["select"].take(slots))
        elif isinstance(policy, DeconfoundedUCB):
            dec = ucb_batch(m, s2, float(policy.z))
        elif isinstance(policy, ContextualTS):
            z = streams["theta"].take(slots).reshape(n, D)
            th = post.mean + np.einsum("nij,nj->ni", post.theta_factor(), z)
            dec = contextual_ts_batch(th, contexts[cidx], k)
        else:  # pragma: no cover - guarded by make_policy
            raise TypeError(f"unsupported policy {policy!r}")
        arm = dec.arm
        X = contexts[cidx]
        y = np.einsum("nd,nd->n", theta.reshape(n, k, d)[ar, arm], X)
        noise = streams["noise"].take(slots)
        if sigma > 0:
            y = y + sigma * noise
        if traces:
            zmin_t = stop_statistic(m, s2)[0] if k > 1 else np.full(n, np.inf)
            for r in np.flatnonzero(np.isin(slots, list(traces))):
                traces[int(slots[r])].append(dict(
                    t=t, context=int(cidx[r]), arm=int(arm[r]), reward=float(y[r]),
                    beta=np.nan if beta_t is None else float(beta_t[r]),
                    top_one=int(dec.top_one[r]), top_two=int(dec.top_two[r]),
                    coin=-1 if coin is None else int(coin[r]),
                    draws=0 if dec_draws is None else int(dec_draws[r]),
                    fallback=0 if dec_fb is None else int(dec_fb[r]),
                    zmin=float(zmin_t[r]), m=m[r].copy(), s2=s2[r].copy()))
        counts[ar, arm] += 1
        s = t % L
        ring_arm[s], ring_ctx[s], ring_y[s] = arm, cidx, y
        rel = t + 1 - L
        if rel >= 1:
            s = rel % L
            post.update(ring_arm[s], ring_ctx[s], ring_y[s])
            naive_n[ar, ring_arm[s]] += 1
            naive_sum[ar, ring_arm[s]] += ring_y[s]
        if t in checkpoints:
            for r in range(n):
                ck = dict(t=t, m=post.m[r].copy(), s2=post.s2[r].copy(), counts=counts[r].copy())
                if post.Q is not None:
                    ck["Q"] = post.Q[r].copy()
                ckpts[int(slots[r])].append(ck)
        # stopping / end of horizon
        if stopping is not None:
            zmin, leader = stop_statistic(post.m, post.s2)
            thr = threshold(t, stopping.delta)
            done = zmin >= thr
            reason = np.where(done, "threshold", None)
            if t >= stopping.max_horizon:
                reason = np.where(done, "threshold", "cap")
                done = np.ones(n, dtype=bool)
        else:
            leader = argmax_lowest(post.m, axis=1)
            done = np.full(n, t == T)
            reason = np.full(n, None)
        if np.any(done):
            rows = np.flatnonzero(done)
            for rsn in set(reason[rows]):
                rr = rows[reason[rows] == rsn]
                finalize(rr, t, rsn, leader[rr])
            keep = ~done
            post.subset(keep)
            slots = slots[keep]
            theta = theta[keep]
            counts, naive_n, naive_sum = counts[keep], naive_n[keep], naive_sum[keep]
            ring_arm, ring_ctx, ring_y = ring_arm[:, keep], ring_ctx[:, keep], ring_y[:, keep]
            beta_prev = beta_prev[keep] if np.ndim(beta_prev) else beta_prev
            draws_tot, fb_tot = draws_tot[keep], fb_tot[keep]
    return [results[s] for s in range(n0)]


# ---------------------------------------------------------------------------
# the mainstream-action example


def _inverse_cdf(p, u):
    """Row-wise categorical draws from probabilities ``p`` with uniforms ``u``."""
    cdf = np.cumsum(p, axis=1)
    cdf[:, -1] = np.inf
    idx = np.argmax(cdf > u[:, None], axis=1)
    # never return a zero-probability category
    bad = p[np.arange(len(idx)), idx] <= 0
    if np.any(bad):
        idx[bad] = np.argmax(p[bad] > 0, axis=1)
    return idx


def simulate_mainstream(env: MainstreamEnvironment, horizon: int, reps: Sequence[int],
                        base_seed: int, policy: str = "contextual-ts",
                        report_at: Sequence[int] = (), after: int = 50,
                        max_resamples: int = 10_000) -> List[dict]:
    """Contextual Thompson sampling (or DTS) on the mainstream-action example.

    The belief is exact: arms 1 and 2 reveal the played segment's type,
    arm 3 reveals ``theta0``, and unrevealed components keep their prior.

    Parameters
    ----------
    env : MainstreamEnvironment
    horizon : int
    reps : sequence of int
    base_seed : int
    policy : {"contextual-ts", "dts"}
        ``"dts"`` plays top-two sampling (beta = 1/2) on the population
        means under the same exact belief, for comparison. The belief is
        small enough to enumerate, so leader and challenger are drawn from
        their exact laws rather than by redrawing; when the redraw budget
        would run out the challenger is uniform over the other two arms.
    report_at : sequence of int
        Periods at which the Bayes selection and its regret are recorded.
    after : int
        Arm-3 plays are counted in periods strictly after this one.

    Returns
    -------
    list of dict
        One record per replication: ``regret`` (at ``horizon``),
        ``regret_at`` (dict), ``arm3_after``, ``plays_after``, ``counts``.
    """
    if policy not in ("contextual-ts", "dts"):
        raise ValueError("policy must be 'contextual-ts' or 'dts'")
    reps = [int(r) for r in reps]
    n = len(reps)
    G = env.grid_size
    truths = [env.sample_truth(rep_generator(base_seed, r, "truth")) for r in reps]
    th0 = np.array([tr[0] for tr in truths])
    tx = np.array([[tr[1], tr[2]] for tr in truths])
    mu = np.stack([env.population_means(tr) for tr in truths])
    ctx_stream = _Stream(base_seed, reps, "context", 1, "uniform")
    th_stream = _Stream(base_seed, reps, "theta", 3, "uniform")
    coin_stream = _Stream(base_seed, reps, "coin", 1, "uniform") if policy == "dts" else None
    if policy == "dts":
        # winner[t1 - 1, t2 - 1, g] = best arm by population mean
        types = np.array([1, 2])
        n1 = (types[:, None] == 1).astype(int) + (types[None, :] == 1)
        pm = np.stack(np.broadcast_arrays(0.5 + 0.25 * n1[:, :, None], 0.5 + 0.25 * (2 - n1)[:, :, None],
                                          env.grid[None, None, :]), axis=-1)
        winner_flat = np.eye(3)[argmax_lowest(pm, axis=-1)].reshape(4, G * 3)
    known0 = np.zeros(n, dtype=bool)
    knownx = np.zeros((n, 2), dtype=bool)
    counts = np.zeros((n, 3), dtype=np.int64)
    arm3_after = np.zeros(n, dtype=np.int64)
    slots = np.arange(n)
    ar = np.arange(n)
    report = sorted(set(int(t) for t in report_at) | {int(horizon)})
    regret_at = {t: None for t in report}

    def draw_types(u):
        # unrevealed segment types are 1 or 2 with probability 1/2 each
        return np.where(knownx, tx, 1 + (u >= 0.5))

    def draw_theta0(u):
        return np.where(known0, th0, env.grid[np.minimum((u * G).astype(int), G - 1)])

    for t in range(1, horizon + 1):
        seg = env.process.index(t, ctx_stream.take(slots))
        u = th_stream.take(slots)
        if policy == "contextual-ts":
            types = draw_types(u[:, :2])
            tseg = types[ar, seg]
            means = np.stack([0.5 + 0.5 * (tseg == 1), 0.5 + 0.5 * (tseg == 2),
                              draw_theta0(u[:, 2])], axis=1)
            arm = argmax_lowest(means, axis=1)
        else:
            # exact law of top-two sampling under the discrete belief: the
            # leader is drawn from alpha, the challenger from alpha restricted
            # to the other arms, unless every redraw in the budget repeats
            # the leader (probability alpha_leader ** budget)
            w1 = np.where(knownx[:, :1], (tx[:, :1] == np.array([1, 2])).astype(float), 0.5)
            w2 = np.where(knownx[:, 1:], (tx[:, 1:] == np.array([1, 2])).astype(float), 0.5)
            w0 = np.where(known0[:, None], (env.grid[None, :] == th0[:, None]).astype(float), 1.0 / G)
            w12 = (w1[:, :, None] * w2[:, None, :]).reshape(n, 4)
            alpha = np.einsum("ng,ngi->ni", w0, (w12 @ winner_flat).reshape(n, G, 3))
            lead = _inverse_cdf(alpha, u[:, 0])
            a_lead = alpha[ar, lead]
            rest = alpha.copy()
            rest[ar, lead] = 0.0
            exhausted = (a_lead >= 1.0) | (u[:, 1] < a_lead ** max_resamples)
            uniform_rest = np.ones((n, 3))
            uniform_rest[ar, lead] = 0.0
            rest = np.where(exhausted[:, None], uniform_rest, rest)
            chal = _inverse_cdf(rest / rest.sum(axis=1, keepdims=True), u[:, 2])
            coin = coin_stream.take(slots) < 0.5
            arm = np.where(coin, lead, chal)
        counts[ar, arm] += 1
        if t > after:
            arm3_after += arm == 2
        known0 |= arm == 2
        knownx[ar, seg] |= arm != 2
        if t in regret_at:
            p1 = np.where(knownx, tx == 1, 0.5).sum(1)
            p2 = np.where(knownx, tx == 2, 0.5).sum(1)
            post_mu = np.stack([0.5 + 0.25 * p1, 0.5 + 0.25 * p2, np.where(known0, th0, 0.5)], axis=1)
            sel = argmax_lowest(post_mu, axis=1)
            regret_at[t] = mu.max(axis=1) - mu[ar, sel]
    out = []
    for j, r in enumerate(reps):
        out.append(dict(rep=r, truth=truths[j], regret=float(regret_at[horizon][j]),
                        regret_at={t: float(v[j]) for t, v in regret_at.items()},
                        arm3_after=int(arm3_after[j]), plays_after=max(horizon - after, 0),
                        counts=counts[j].copy()))
    return out
