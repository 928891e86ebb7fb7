"""Command-line front end.

Every verb reads a JSON config (or a named preset), applies ``--set``
overrides, validates once, runs, and writes its artifacts together with
the fully resolved config to the output directory. Re-running the echoed
``config.json`` with the same seed reproduces every file byte for byte.

Exit codes: 0 success, 1 invalid config or invocation, 2 runtime error.
"""

from __future__ import annotations

import copy
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import click
import numpy as np

from .allocation import allocation_for, verify_equilibrium
from .engine import RunSpec, simulate_mainstream
from .environments import Environment, MainstreamEnvironment, build_environment
from .harness import (
    TRACE_SCHEMA,
    RunTrace,
    build_id,
    convergence_diagnostics,
    cost_sweep,
    info_measure_V,
    iota,
    posterior_entropy,
    prop1_bound,
    resolve_parallelism,
    run_replications,
    summarize,
    write_json,
    write_table_csv,
    write_trace_csv,
)
from .model import ConfigError
from .policies import make_policy
from .stopping import StoppingConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

RUN_DEFAULTS = {
    "horizon": None,
    "stopping": None,
    "truth": "fixed",
    "reps": 100,
    "batch_size": 250,
    "trace_reps": [0],
    "checkpoints": None,
    "exponents": False,
}

PRESETS: Dict[str, dict] = {
    "counterexample-l1": {
        "environment": {"generator": "counterexample", "horizon": 1000, "delay": 1},
        "policies": [{"name": "naive-ts"}, {"name": "deconfounded-ucb", "z": 1.645},
                     {"name": "dts", "beta": 0.5}],
        "run": {"horizon": 1000, "truth": "prior", "reps": 2000},
    },
    "counterexample-l2": {
        "environment": {"generator": "counterexample", "horizon": 1000, "delay": 2},
        "policies": [{"name": "naive-ts"}, {"name": "deconfounded-ucb", "z": 1.645},
                     {"name": "dts", "beta": 0.5}],
        "run": {"horizon": 1000, "truth": "prior", "reps": 2000},
    },
    "day-of-week": {
        "environment": {"generator": "day-of-week", "m": 10, "days": 7, "n_arms": 4},
        "policies": [{"name": "dts", "beta": 0.5}, {"name": "naive-ts"}],
        "run": {"horizon": 70, "truth": "prior", "reps": 1000},
    },
    "latent-kappa1000": {
        "environment": {"generator": "latent-confounder", "horizon": 1000, "kappa": 1000.0},
        "policies": [{"name": "dts", "beta": 0.5}, {"name": "naive-ts"}],
        "run": {"horizon": 1000, "truth": "prior", "reps": 20, "batch_size": 5,
                "checkpoints": []},
    },
    "latent-kappa10000": {
        "environment": {"generator": "latent-confounder", "horizon": 1000, "kappa": 10000.0},
        "policies": [{"name": "dts", "beta": 0.5}, {"name": "naive-ts"}],
        "run": {"horizon": 1000, "truth": "prior", "reps": 20, "batch_size": 5,
                "checkpoints": []},
    },
    "mainstream": {
        "environment": {"generator": "mainstream", "grid_size": 101},
        "policies": [{"name": "contextual-ts"}, {"name": "dts", "beta": 0.5}],
        "run": {"horizon": 10000, "reps": 2000, "report_at": [50, 100, 1000, 10000]},
    },
}


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}", "config")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})", "config") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides (values parsed as JSON when possible)."""
    cfg = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "--set")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            if not isinstance(node.get(part, {}), dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping", "--set")
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    return cfg


def resolve_config(raw: dict, *, seed: Optional[int] = None, reps: Optional[int] = None,
                   overrides=()) -> dict:
    """Fill defaults and normalise a config; validated by :func:`prepare`."""
    cfg = apply_overrides(raw, overrides)
    if "environment" not in cfg and "instance" in cfg:
        inst = dict(cfg.pop("instance"))
        inst.setdefault("generator", "iid")
        cfg["environment"] = inst
    if "environment" not in cfg:
        raise ConfigError("config needs an 'environment' (or 'instance') section", "environment")
    if "policy" in cfg and "policies" not in cfg:
        cfg["policies"] = [cfg.pop("policy")]
    pols = cfg.get("policies", [{"name": "dts", "beta": "plugin"}])
    cfg["policies"] = [{"name": p} if isinstance(p, str) else dict(p) for p in pols]
    run = dict(RUN_DEFAULTS)
    run.update(cfg.get("run", {}))
    if reps is not None:
        run["reps"] = int(reps)
    cfg["run"] = run
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    return cfg


def prepare(cfg: dict):
    """Validate a resolved config; return the environment and policy objects."""
    seed = cfg["seed"]
    try:
        env = build_environment(cfg["environment"], seed=seed)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc), "environment") from None
    policies = []
    for p in cfg["policies"]:
        try:
            policies.append(make_policy(p))
        except ValueError as exc:
            raise ConfigError(str(exc), "policies") from None
    run = cfg["run"]
    if not isinstance(env, MainstreamEnvironment):
        if (run["horizon"] is None) == (run["stopping"] is None) and "sweep" not in cfg:
            raise ConfigError("run needs exactly one of 'horizon' and 'stopping'", "run")
        if run["truth"] == "fixed" and env.instance.theta is None:
            raise ConfigError("no truth given; set truth.theta or run.truth='prior'", "truth")
    if int(run["reps"]) < 1:
        raise ConfigError("reps must be at least 1", "run.reps")
    return env, policies


def _labels(policies: List[dict]) -> List[str]:
    labels, seen = [], {}
    for p in policies:
        name = p["name"]
        seen[name] = seen.get(name, 0) + 1
        labels.append(name if seen[name] == 1 else f"{name}-{seen[name]}")
    return labels


def _spec(env, policy, run, **extra) -> RunSpec:
    stopping = None
    if run.get("stopping") is not None:
        st = run["stopping"]
        stopping = StoppingConfig(float(st["delta"]), int(st.get("max_horizon", 1_000_000)))
    return RunSpec(env, policy, horizon=run.get("horizon"), stopping=stopping,
                   truth=run["truth"], checkpoints=run.get("checkpoints"),
                   batch_size=int(run["batch_size"]), **extra)


def _header(cfg) -> dict:
    return {"build_id": build_id(), "config": cfg}


def _bounds(env: Environment, results, horizon: Optional[int]) -> dict:
    """Information bound for deterministic-context environments with a shared per-arm prior."""
    inst, proc = env.instance, env.process
    prior = inst.prior
    if horizon is None or proc.is_random or prior.has_cross_arm_covariance or inst.sigma2 <= 0:
        return {}
    S = prior.shared_arm_covariance
    if S is None:
        return {}
    X = proc.sequence(horizon)
    V = info_measure_V(X, S, inst.sigma2, inst.x_pop)
    H = float(np.mean([posterior_entropy(r.final_m, r.final_s2) for r in results]))
    return {
        "V": V,
        "iota": iota(inst.d, horizon, S),
        "prop1_logk": prop1_bound(inst.k, inst.d, horizon, S, V, "logk"),
        "entropy_estimate": H,
        "prop1_estimate": prop1_bound(inst.k, inst.d, horizon, S, V, H),
    }


# ---------------------------------------------------------------------------
# verbs


def do_run(cfg: dict, out: Path, parallelism=None, *, diagnostics: bool = False) -> dict:
    env, policies = prepare(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg, out / "config.json")
    write_json(TRACE_SCHEMA, out / "trace_schema.json")
    run = cfg["run"]
    seed = cfg["seed"]
    report = {}
    if isinstance(env, MainstreamEnvironment):
        for label, pol in zip(_labels(cfg["policies"]), cfg["policies"]):
            recs = simulate_mainstream(env, int(run["horizon"]), range(int(run["reps"])), seed,
                                       policy=pol["name"], report_at=run.get("report_at", ()))
            report[label] = _mainstream_summary(recs, seed)
            rows = [dict(rep=r["rep"], arm3_after=r["arm3_after"], regret=r["regret"],
                         counts=r["counts"].tolist(),
                         **{f"regret_t{t}": v for t, v in r["regret_at"].items()})
                    for r in recs]
            write_table_csv(rows, out / f"{label}_reps.csv")
            write_json({**_header(cfg), "policy": pol, "summary": report[label]},
                       out / f"{label}_summary.json")
        return report
    allocation = None
    if diagnostics:
        if not env.process.is_random or env.instance.theta is None:
            raise ConfigError("diagnostics need i.i.d. contexts and a fixed truth", "environment")
        allocation = allocation_for(env.instance, env.second_moment())
    for label, pol_cfg, policy in zip(_labels(cfg["policies"]), cfg["policies"], policies):
        spec = _spec(env, policy, run)
        trace_reps = [int(r) for r in run.get("trace_reps") or () if int(r) < int(run["reps"])]
        results = run_replications(spec, int(run["reps"]), seed, parallelism, trace_reps)
        summ = summarize(results, seed, exponents=bool(run.get("exponents")) or diagnostics,
                         p_star=None if allocation is None else allocation.p_star)
        summ.bounds = _bounds(env, results, run.get("horizon"))
        doc = {**_header(cfg), "policy": pol_cfg, "summary": summ.to_dict()}
        if allocation is not None:
            diag = convergence_diagnostics(results, allocation)
            doc["allocation"] = allocation.to_dict()
            doc["diagnostics"] = diag
            write_table_csv(diag, out / f"{label}_diagnostics.csv")
        write_json(doc, out / f"{label}_summary.json")
        k = env.instance.k
        write_table_csv([dict(zip(["rep", "tau", "stop_reason", "best_arm", "selected", "regret"]
                                  + [f"count_{i}" for i in range(k)], row))
                         for row in summ.rep_rows()], out / f"{label}_reps.csv")
        for res in results:
            if res.trace is not None:
                write_trace_csv(RunTrace.from_result(res, seed), out / f"{label}_trace_rep{res.rep}.csv")
        report[label] = summ.to_dict()
    return report


def _mainstream_summary(recs, seed) -> dict:
    from .harness import _mean_ci

    times = sorted(recs[0]["regret_at"])
    arm3 = np.array([r["arm3_after"] for r in recs], dtype=float)
    plays = max(recs[0]["plays_after"], 1)
    return {
        "n_reps": len(recs),
        "base_seed": seed,
        "arm3_frequency_after": float(arm3.sum() / (plays * len(recs))),
        "regret": {str(t): _mean_ci([r["regret_at"][t] for r in recs]) for t in times},
    }


def do_sweep(cfg: dict, out: Path, parallelism=None) -> List[dict]:
    env, policies = prepare(cfg)
    sw = cfg.get("sweep")
    if not sw or "c_values" not in sw:
        raise ConfigError("sweep needs 'sweep.c_values'", "sweep")
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg, out / "config.json")
    gamma = None
    if env.instance.theta is not None and env.process.is_random:
        gamma = allocation_for(env.instance, env.second_moment()).gamma
    rows = cost_sweep(env, policies[0], [float(c) for c in sw["c_values"]], int(cfg["run"]["reps"]),
                      cfg["seed"], max_horizon=int(sw.get("max_horizon", 1_000_000)),
                      parallelism=parallelism, gamma=gamma)
    write_table_csv(rows, out / "sweep.csv")
    write_json({**_header(cfg), "sweep": rows}, out / "sweep_summary.json")
    return rows


def do_solve_allocation(cfg: dict) -> dict:
    env, _ = prepare_instance_only(cfg)
    if env.instance.theta is None:
        raise ConfigError("solve-allocation needs a truth (truth.theta or truth.seed)", "truth")
    lam = env.second_moment()
    sol = allocation_for(env.instance, lam)
    doc = {"allocation": sol.to_dict()}
    try:
        doc["certificate"] = verify_equilibrium(env.instance, sol, lam).to_dict()
    except ValueError as exc:
        doc["certificate"] = {"error": str(exc)}
    return doc


def prepare_instance_only(cfg: dict):
    try:
        env = build_environment(cfg["environment"], seed=cfg["seed"])
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc), "environment") from None
    if isinstance(env, MainstreamEnvironment):
        raise ConfigError("the mainstream example has no Gaussian instance", "environment")
    return env, None


def validate_report(cfg: dict) -> dict:
    env, policies = prepare(cfg)
    out = {"status": "OK"}
    if isinstance(env, MainstreamEnvironment):
        out["x_pop"] = env.x_pop.tolist()
        return out
    inst = env.instance
    lam = env.second_moment()
    out["x_pop"] = inst.x_pop.tolist()
    out["second_moment_eigenvalues"] = np.linalg.eigvalsh(lam).tolist()
    T = cfg["run"].get("horizon")
    if T:
        S = inst.prior.arm_covariance(0)
        out["iota"] = iota(inst.d, int(T), S)
    return out


# ---------------------------------------------------------------------------
# click wiring


def _common(f):
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a config entry (dotted key, JSON value).")(f)
    f = click.option("--parallelism", type=int, default=None,
                     help="Worker processes (default $DECONFOUND_PARALLELISM or 1).")(f)
    f = click.option("--reps", type=int, default=None, help="Number of replications.")(f)
    f = click.option("--seed", type=int, default=None, help="Base seed for all randomness.")(f)
    f = click.option("--out", "-o", type=click.Path(file_okay=False), default="out",
                     show_default=True, help="Output directory.")(f)
    return f


def _config_option(f):
    return click.option("--config", "-c", "config_path", type=str, required=True,
                        help="JSON config file.")(f)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Deconfounded Thompson sampling experiments."""


@cli.command()
@_config_option
@_common
def run(config_path, out, seed, reps, parallelism, overrides):
    """Run a Monte Carlo study and write traces and summaries."""
    cfg = resolve_config(load_config(config_path), seed=seed, reps=reps, overrides=overrides)
    report = do_run(cfg, Path(out), resolve_parallelism(parallelism))
    click.echo(json.dumps({k: v["metrics"]["regret"] for k, v in report.items()
                           if "metrics" in v}, sort_keys=True))


@cli.command()
@_config_option
@_common
def diagnose(config_path, out, seed, reps, parallelism, overrides):
    """Run and report convergence of proportions and of the posterior exponent."""
    cfg = resolve_config(load_config(config_path), seed=seed, reps=reps, overrides=overrides)
    do_run(cfg, Path(out), resolve_parallelism(parallelism), diagnostics=True)
    click.echo(f"wrote diagnostics to {out}")


@cli.command()
@_config_option
@_common
def sweep(config_path, out, seed, reps, parallelism, overrides):
    """Cost sweep: stopping-rule runs with delta = c for each c."""
    cfg = resolve_config(load_config(config_path), seed=seed, reps=reps, overrides=overrides)
    rows = do_sweep(cfg, Path(out), resolve_parallelism(parallelism))
    for r in rows:
        click.echo(f"c={r['c']:g} tau={r['tau']:.1f} cost={r['cost']:.4g} "
                   f"normalized={r['normalized_cost']:.4g}")


@cli.command("solve-allocation")
@_config_option
@click.option("--seed", type=int, default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
def solve_allocation(config_path, seed, overrides, out):
    """Print the optimal allocation and equilibrium certificate as JSON."""
    raw = load_config(config_path)
    raw.setdefault("run", {})
    cfg = resolve_config(raw, seed=seed, overrides=overrides)
    doc = do_solve_allocation(cfg)
    text = json.dumps(_json_ready(doc), sort_keys=True, indent=2)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_json(cfg, Path(out) / "config.json")
        write_json(doc, Path(out) / "allocation.json")
    click.echo(text)


@cli.command("validate-config")
@_config_option
@click.option("--seed", type=int, default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def validate_config(config_path, seed, overrides):
    """Validate a config without running it and print derived quantities."""
    cfg = resolve_config(load_config(config_path), seed=seed, overrides=overrides)
    rep = validate_report(cfg)
    click.echo("OK")
    for key, v in rep.items():
        if key != "status":
            click.echo(f"{key}: {json.dumps(_json_ready(v))}")


@cli.command()
@click.argument("preset", type=click.Choice(sorted(PRESETS)))
@_common
def reproduce(preset, out, seed, reps, parallelism, overrides):
    """Run a bundled example end to end."""
    cfg = resolve_config(PRESETS[preset], seed=seed, reps=reps, overrides=overrides)
    report = do_run(cfg, Path(out), resolve_parallelism(parallelism))
    click.echo(json.dumps(_json_ready({k: v.get("metrics", v.get("regret")) for k, v in report.items()}),
                          sort_keys=True))


def _json_ready(obj):
    from .harness import _plain

    return _plain(obj)


def main(argv=None) -> int:
    """Entry point; returns the process exit code."""
    try:
        cli.main(args=argv, prog_name="deconfound", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(exc.format_message(), err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return EXIT_CONFIG
    except click.Abort:
        return EXIT_RUNTIME
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - map anything else to a runtime failure
        click.echo(f"runtime error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
