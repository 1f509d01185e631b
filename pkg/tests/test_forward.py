import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffpark.dynamics import ActionCommand, DynamicsParams, VehicleState, guidance_batch
from diffpark.errors import CollectionError, ConfigError, SchemaError, UsageError
from diffpark.forward import (
    NoiseSchedule,
    TrajectoryDataset,
    TransitionRecord,
    actions_in_bounds,
    check_chains,
    collect,
    dumps_dataset,
    loads_dataset,
    reverse_dataset,
    rollback_arrays,
    sample_chained_action,
    sigma_at,
    termination_histogram,
)
from diffpark.world import scenario_1

DYN = DynamicsParams()


@pytest.fixture(scope="module")
def small_dataset():
    return collect(scenario_1(), NoiseSchedule(), 10, seed=4)


# ---------------------------------------------------------------- schedule

def test_sigma_endpoints_and_midpoint():
    s = NoiseSchedule((0.05,), (0.5,), 101)
    assert sigma_at(0, s) == 0.05
    assert sigma_at(100, s) == 0.5
    assert sigma_at(50, s) == pytest.approx(0.275, abs=1e-15)
    with pytest.raises(UsageError):
        sigma_at(101, s)
    with pytest.raises(UsageError):
        sigma_at(-1, s)


def test_default_schedule_endpoints_exact():
    s = NoiseSchedule()
    np.testing.assert_array_equal(sigma_at(0, s), s.sigma_min)
    np.testing.assert_array_equal(sigma_at(s.T - 1, s), s.sigma_max)


@given(st.floats(0, 2), st.floats(0, 2), st.integers(2, 300))
def test_sigma_monotone_affine(a, b, T):
    lo, hi = min(a, b), max(a, b)
    s = NoiseSchedule((lo,), (hi,), T)
    vals = np.array([sigma_at(i, s) for i in range(T)])
    assert np.all(np.diff(vals) >= -1e-15)
    np.testing.assert_allclose(np.diff(vals, 2), 0, atol=1e-12)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        NoiseSchedule((1.0, 0.1), (0.5, 0.2), 10)
    with pytest.raises(ConfigError):
        NoiseSchedule((0.1,), (0.2,), 1)
    with pytest.raises(ConfigError):
        NoiseSchedule((-0.1,), (0.2,), 10)


# ---------------------------------------------------------------- chained sampling

def test_zero_sigma_returns_prev():
    prev = ActionCommand(1.5, -0.2)
    assert sample_chained_action(prev, [0.0, 0.0], (DYN.lb, DYN.ub), np.random.default_rng(0)) == prev


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 10))
def test_chained_action_clipped(seed, sigma):
    a = sample_chained_action([0.0, 0.0], [sigma, sigma], ([-1, -1], [1, 1]), np.random.default_rng(seed))
    assert -1 <= a.throttle <= 1 and -1 <= a.steer <= 1


def test_chained_action_moments():
    rng = np.random.default_rng(2)
    n = 100_000
    draws = np.array([sample_chained_action([0.0, 0.0], [0.1, 0.1], ([-1, -1], [1, 1]), rng).as_array()
                      for _ in range(n)])
    assert np.all(np.abs(draws.mean(axis=0)) < 3 * 0.1 / math.sqrt(n))
    assert np.mean(np.abs(draws) >= 1) < 1e-4


def test_chain_autocorrelation():
    rng = np.random.default_rng(8)
    a = np.zeros(2)
    seq = []
    for _ in range(10_000):
        a = sample_chained_action(a, [0.2, 0.02], (DYN.lb, DYN.ub), rng).as_array()
        seq.append(a)
    x = np.array(seq)[:, 0]
    r = np.corrcoef(x[:-1], x[1:])[0, 1]
    # 99% one-sided bound for zero correlation is about 2.33 / sqrt(n)
    assert r > 2.33 / math.sqrt(len(x))


# ---------------------------------------------------------------- collection

def test_zero_schedule_vehicles_never_move():
    sched = NoiseSchedule((0.0, 0.0), (0.0, 0.0), 20)
    d = collect(replace(scenario_1(), n_controlled=1), sched, 1, seed=0, max_steps=20)
    assert termination_histogram(d) == {"max_steps": 1}
    assert len(d) == 20
    for r in d.records:
        assert r.action == ActionCommand(0.0, 0.0)
        assert r.next_state == r.state


def test_collect_audit(small_dataset):
    assert actions_in_bounds(small_dataset, DYN)
    assert check_chains(small_dataset)
    assert small_dataset.trial_ids() == list(range(10))
    for r in small_dataset.records:
        step = np.hypot(r.next_state.x - r.state.x, r.next_state.y - r.state.y)
        assert step <= DYN.v_max * DYN.dt + 0.2


def test_guidance_matches_origin_spot(small_dataset):
    lot = scenario_1()
    centers = np.array([s.center for s in lot.spots])
    for (trial, vehicle), chain in small_dataset.chains().items():
        first = chain[0].state
        origin = centers[np.argmin(np.hypot(centers[:, 0] - first.x, centers[:, 1] - first.y))]
        for r in chain:
            g = guidance_batch(np.array([r.state.x, r.state.y]), origin)
            assert abs(g[0] - r.theta) < 1e-9 and abs(g[1] - r.l) < 1e-9


def test_collect_validation():
    with pytest.raises(ConfigError):
        collect(scenario_1(), NoiseSchedule(T=100), 1, seed=0, max_steps=50)
    with pytest.raises(CollectionError):
        collect(scenario_1(), NoiseSchedule(), 0, seed=0)


def test_collect_threads_match_sequential():
    a = collect(scenario_1(), NoiseSchedule(), 6, seed=1, threads=1)
    b = collect(scenario_1(), NoiseSchedule(), 6, seed=1, threads=3)
    assert dumps_dataset(a) == dumps_dataset(b)


# ---------------------------------------------------------------- reversal

def _record(trial, t, x):
    return TransitionRecord(trial, 0, t, VehicleState(x, 0, 1, 0, 0), math.pi, x, ActionCommand(0.5, 0.0),
                            VehicleState(x + 0.1, 0, 1, 0, 0))


def test_three_step_chain_reverses_in_order():
    d = TrajectoryDataset([_record(0, 0, 0.0), _record(0, 1, 0.1)], {})
    rev = reverse_dataset(d)
    # forward S0 -> S1 -> S2 becomes S'2 -> S'1, S'1 -> S'0
    assert [r.state.x for r in rev.records] == [0.2, 0.1]
    assert [r.next_state.x for r in rev.records] == [0.1, 0.0]
    assert all(r.state.vx == -1.0 for r in rev.records)
    assert rev.records[0].action == ActionCommand(0.5, 0.0)


def test_reverse_twice_recovers_states(small_dataset):
    back = reverse_dataset(reverse_dataset(small_dataset))
    key = lambda r: (r.trial_id, r.vehicle_id, r.t)
    for a, b in zip(sorted(small_dataset.records, key=key), sorted(back.records, key=key)):
        np.testing.assert_allclose(a.state.as_array(), b.state.as_array(), atol=1e-12)
        np.testing.assert_allclose(a.next_state.as_array(), b.next_state.as_array(), atol=1e-12)


def test_rollback_arrays_shapes(small_dataset):
    S, G, T = rollback_arrays(reverse_dataset(small_dataset))
    assert S.shape == T.shape == (len(small_dataset), 5)
    assert G.shape == (len(small_dataset), 2)
    with pytest.raises(UsageError):
        rollback_arrays(TrajectoryDataset([], {}))


# ---------------------------------------------------------------- serialisation

def test_dataset_round_trip(small_dataset):
    text = dumps_dataset(small_dataset)
    again = loads_dataset(text)
    assert again.records == small_dataset.records
    assert dumps_dataset(again) == text


def test_truncated_file_names_line(small_dataset):
    lines = dumps_dataset(small_dataset).splitlines()
    broken = "\n".join(lines[:5] + [lines[5][: len(lines[5]) // 2]])
    with pytest.raises(SchemaError, match=":6:"):
        loads_dataset(broken, "data.jsonl")


def test_bad_header():
    with pytest.raises(SchemaError):
        loads_dataset('{"kind": "header", "schema_version": 99}\n')
    with pytest.raises(SchemaError):
        loads_dataset("")


def test_collection_is_seeded():
    a = dumps_dataset(collect(scenario_1(), NoiseSchedule(), 3, seed=11))
    b = dumps_dataset(collect(scenario_1(), NoiseSchedule(), 3, seed=11))
    c = dumps_dataset(collect(scenario_1(), NoiseSchedule(), 3, seed=12))
    assert a == b and a != c
