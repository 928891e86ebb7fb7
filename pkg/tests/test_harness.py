import json
import math

import numpy as np
import pytest

from deconfound.engine import RunSpec
from deconfound.environments import make_day_of_week_instance, make_reference_instance
from deconfound.harness import (
    RunTrace,
    TRACE_SCHEMA,
    cost_sweep,
    exponent,
    info_measure_V,
    iota,
    monte_carlo,
    posterior_entropy,
    prop1_bound,
    resolve_parallelism,
    run_episode,
    run_replications,
    trace_columns,
    write_json,
    write_table_csv,
    write_trace_csv,
)
from deconfound.policies import DTS


def test_day_of_week_information_quantities():
    env = make_day_of_week_instance(m=10)
    X = env.process.sequence(70)
    V = info_measure_V(X, np.eye(7), 1.0, env.instance.x_pop)
    assert V == pytest.approx(1 / 77)
    assert iota(7, 70, np.eye(7)) == pytest.approx(9 * math.log(7 * 71))
    assert prop1_bound(4, 7, 70, np.eye(7), V) == pytest.approx(
        math.sqrt(2 * 9 * math.log(7 * 71) * 4 * math.log(4) / 77))


def test_iota_floor():
    assert iota(1, 1, [[1e-3]]) == 9.0


def test_exponent_falls_back_to_bound_when_alpha_saturates():
    val, exact = exponent(np.array([1.0, 0.0]), np.array([0.01, 0.01]), 0, 10)
    assert exact
    val2, exact2 = exponent(np.array([1e3, 0.0]), np.array([1e-4, 1e-4]), 0, 10)
    assert val2 > 0 and np.isfinite(val2)


def test_posterior_entropy_range():
    assert posterior_entropy(np.zeros(4), np.ones(4)) == pytest.approx(math.log(4), rel=1e-4)
    assert posterior_entropy(np.array([10.0, 0.0]), np.full(2, 1e-3)) < 1e-6


def test_parallelism_does_not_change_results():
    env = make_reference_instance()
    spec = RunSpec(env, DTS("plugin"), horizon=50, batch_size=4)
    a = run_replications(spec, 10, 3, parallelism=1)
    b = run_replications(spec, 10, 3, parallelism=2)
    assert [r.regret for r in a] == [r.regret for r in b]
    assert [r.counts.tolist() for r in a] == [r.counts.tolist() for r in b]


def test_resolve_parallelism(monkeypatch):
    monkeypatch.setenv("DECONFOUND_PARALLELISM", "3")
    assert resolve_parallelism(None) == 3
    assert resolve_parallelism(2) == 2
    with pytest.raises(ValueError):
        resolve_parallelism(0)


def test_monte_carlo_summary_and_outputs(tmp_path):
    env = make_reference_instance()
    spec = RunSpec(env, DTS(0.5), horizon=32)
    summ = monte_carlo(spec, 6, 1, exponents=True, trace_reps=[0])
    assert summ.n_reps == 6
    assert 0.0 <= summ.metrics["correct"]["mean"] <= 1.0
    assert summ.checkpoints[-1]["t"] == 32
    doc = summ.to_dict()
    write_json(doc, tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())["n_reps"] == 6
    trace = RunTrace.from_result(summ.results[0], 1)
    assert len(trace) == 32
    path = write_trace_csv(trace, tmp_path / "t.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header == trace_columns(3)
    assert TRACE_SCHEMA["version"] == "1"
    rows = list(summ.rep_rows())
    assert len(rows) == 6 and rows[0][0] == 0
    write_table_csv([{"rep": r[0], "regret": r[5]} for r in rows], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().startswith("rep,regret")


def test_run_episode():
    env = make_reference_instance()
    trace = run_episode(env, DTS(0.5), horizon=20, seed=4)
    assert trace.tau == 20
    assert trace.records["arm"].shape == (20,)


def test_cost_sweep_rows():
    env = make_reference_instance()
    rows = cost_sweep(env, DTS("plugin"), [0.1, 0.01], 5, 0)
    assert [r["c"] for r in rows] == [0.1, 0.01]
    assert rows[1]["tau"] >= rows[0]["tau"]
    with pytest.raises(ValueError):
        cost_sweep(make_reference_instance(delay=2), DTS(), [0.1], 2, 0)


def test_episode_is_replayable():
    from deconfound.policies import Uniform

    env = make_reference_instance()
    a = run_episode(env, Uniform(), horizon=10, seed=3)
    b = run_episode(env, Uniform(), horizon=10, seed=3)
    for key in a.records:
        np.testing.assert_array_equal(a.records[key], b.records[key])


def test_single_replication_summary_equals_trace():
    env = make_reference_instance()
    summ = monte_carlo(RunSpec(env, DTS(0.5), horizon=25), 1, 8)
    res = summ.results[0]
    assert summ.metrics["regret"]["mean"] == res.regret
    assert summ.metrics["tau"]["mean"] == res.tau
    assert summ.metrics["regret"]["ci"] == 0.0
