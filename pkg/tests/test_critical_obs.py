"""Q fitting, Q-gap, elbow threshold and critical-set tests."""

import numpy as np
import pytest

from hope_ope.critical_obs import (CriticalSet, QTable, all_critical_set,
                                   all_gaps, critical_set, fit_q, q_gap,
                                   select_threshold_elbow)
from hope_ope.trajectory import Dataset, Trajectory

from mdp_fixture import behavior_policy, make_mdp


def _traj(obs, acts, rewards):
    return Trajectory(obs, acts, None, float(sum(rewards)))


def _rewards(dataset, rewards):
    return [np.asarray(r, dtype=np.float64) for r in rewards]


def test_single_terminal_transition():
    data = Dataset([_traj([0, 1], [0], [0.7])], 2, 1, 1.0)
    q = fit_q(data, _rewards(data, [[0.7]]))
    assert q.values[0, 0] == pytest.approx(0.7, abs=1e-12)
    assert q.visited[0, 0] and not q.visited[1, 0]


def test_two_state_chain_hand_solution():
    # deterministic chain 0 -> 1 -> 0 -> 1 ..., single action, gamma = 0.5,
    # r(0) = 1, r(1) = 0.  Fixed point: Q0 = 1 + 0.5 Q1, Q1 = 0 + 0.5 Q0,
    # so Q0 = 4/3, Q1 = 2/3.  Built from episodes long enough that the
    # non-terminal averages dominate.
    trajs, rewards = [], []
    for start in (0, 1):
        obs = [(start + t) % 2 for t in range(9)]
        trajs.append(_traj(obs, [0] * 8, [0.0] * 8))
        rewards.append([1.0 if o == 0 else 0.0 for o in obs[:8]])
    data = Dataset(trajs, 2, 1, 0.5)
    q = fit_q(data, _rewards(data, rewards), sweeps=10_000, tol=1e-12)
    # each pair is visited 8 times, once terminally (no continuation), so
    # the fixed point is Q0 = 1 + (7/16) Q1, Q1 = (7/16) Q0:
    assert q.values[0, 0] == pytest.approx(256 / 207, abs=1e-9)
    assert q.values[1, 0] == pytest.approx(112 / 207, abs=1e-9)


def test_gamma_zero_mean_immediate():
    data = Dataset([
        _traj([0, 1], [0], [1.0]),
        _traj([0, 1], [0], [3.0]),
    ], 2, 1, 1.0)
    q = fit_q(data, _rewards(data, [[1.0], [3.0]]), gamma=0.0)
    assert q.values[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_sweep_deltas_contract():
    mdp = make_mdp()
    dataset = mdp.simulate(behavior_policy(), 200, seed=5)
    rewards = [t.ground_truth_rewards for t in dataset.trajectories]
    q = fit_q(dataset, _rewards(dataset, rewards))
    deltas = q.fit_meta["deltas"]
    burn_in = 3
    for prev, cur in zip(deltas[burn_in:], deltas[burn_in + 1:]):
        assert cur <= prev * 1.01


def test_q_gap():
    values = np.array([[1.0, -1.0, 0.0], [2.0, 2.0, 2.0]])
    visited = np.ones_like(values, dtype=bool)
    q = QTable(values, visited)
    assert q_gap(q, 0) == 2.0
    assert q_gap(q, 1) == 0.0


def test_q_gap_matches_pairwise_bruteforce():
    rng = np.random.default_rng(2)
    values = rng.normal(size=(20, 4))
    visited = rng.random((20, 4)) < 0.7
    q = QTable(values, visited)
    for o in range(20):
        acts = np.flatnonzero(visited[o])
        if acts.size == 0:
            assert q_gap(q, o) == 0.0
            continue
        brute = max(values[o, a] - values[o, b] for a in acts for b in acts)
        assert q_gap(q, o) == pytest.approx(brute, abs=1e-15)


def test_q_gap_shift_invariant():
    values = np.array([[0.3, 1.1, -0.4]])
    q1 = QTable(values, np.ones_like(values, dtype=bool))
    q2 = QTable(values + 10.0, np.ones_like(values, dtype=bool))
    assert q_gap(q1, 0) == pytest.approx(q_gap(q2, 0), abs=1e-12)


def test_elbow_worked_example():
    assert select_threshold_elbow([10.0, 9.5, 9.0, 1.0, 0.9, 0.8]) == 9.0


def test_elbow_degenerate_curves():
    with pytest.warns(UserWarning):
        assert select_threshold_elbow([5.0, 4.0, 3.0, 2.0, 1.0]) == 0.0
    with pytest.warns(UserWarning):
        assert select_threshold_elbow([1.0, 0.5]) == 0.0


def test_critical_set_strict_threshold():
    values = np.array([[0.0, 3.0], [0.0, 1.0], [0.0, 0.0]])
    q = QTable(values, np.ones_like(values, dtype=bool))
    assert critical_set(q, 1.0).observations == {0}
    assert critical_set(q, float("inf")).observations == set()
    assert critical_set(q, -1.0).observations == {0, 1, 2}
    gaps = all_gaps(q)
    for h in (0.0, 0.5, 1.0, 2.0):
        cs = critical_set(q, h)
        for o in range(3):
            assert (o in cs) == (gaps[o] > h)


def test_critical_set_monotone_in_h():
    rng = np.random.default_rng(8)
    values = rng.normal(size=(30, 3))
    q = QTable(values, np.ones_like(values, dtype=bool))
    prev = None
    for h in sorted(rng.uniform(0, 3, size=5)):
        cur = critical_set(q, h).observations
        if prev is not None:
            assert cur <= prev
        prev = cur


def test_all_critical_set_covers_dataset():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 30, seed=3)
    cs = all_critical_set(data)
    seen = {o for t in data.trajectories for o in t.observations[:len(t)]}
    assert cs.observations == seen


def test_serialization_roundtrips():
    values = np.array([[1.5, 0.0], [0.0, -2.0]])
    visited = np.array([[True, False], [False, True]])
    q = QTable(values, visited, {"sweeps": 3})
    clone = QTable.from_json(q.to_json())
    assert np.array_equal(clone.values, values)
    assert np.array_equal(clone.visited, visited)
    cs = CriticalSet(frozenset({2, 5}), 0.25)
    clone = CriticalSet.from_json(cs.to_json())
    assert clone.observations == cs.observations
    assert clone.threshold == cs.threshold
