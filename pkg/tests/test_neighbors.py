"""Trajectory distance, KNN search, averaging matrix and reconstruction."""

import numpy as np
import pytest

from hope_ope.neighbors import (KL_EPSILON, NeighborIndex, averaged_reward,
                                build_matrix, build_neighbor_index,
                                find_k_nearest, observation_distance,
                                reconstruct, trajectory_distance)
from hope_ope.trajectory import Dataset, Trajectory

from mdp_fixture import behavior_policy, make_mdp


def _traj(obs, acts, agg=0.0):
    return Trajectory(obs, acts, None, float(agg))


def test_identical_trajectories_distance_zero():
    a = _traj([0, 1, 2], [0, 1])
    b = _traj([0, 1, 2], [0, 1])
    assert trajectory_distance(a, b) == pytest.approx(0.0, abs=1e-15)


def test_distance_nonnegative():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 30, seed=6)
    rng = np.random.default_rng(0)
    for _ in range(100):
        i, j = rng.integers(0, 30, size=2)
        d = trajectory_distance(data.trajectories[i], data.trajectories[j])
        assert d >= -1e-15


def test_two_symbol_kl_hand_value():
    # observation distributions: query (0.75, 0.25), other (0.5, 0.5);
    # actions identical so the action term vanishes
    a = _traj([0, 0, 0, 1, 0], [0, 0, 0, 0])
    b = _traj([0, 0, 1, 1, 0], [0, 0, 0, 0])
    eps = KL_EPSILON
    z = 1.0 + 2 * eps
    p = [(0.5 + eps) / z, (0.5 + eps) / z]
    q = [(0.75 + eps) / z, (0.25 + eps) / z]
    expected = sum(pi * np.log(pi / qi) for pi, qi in zip(p, q))
    assert trajectory_distance(a, b) == pytest.approx(expected, abs=1e-12)


def test_observation_distance():
    assert observation_distance(3, 3) == 0.0
    assert observation_distance(2, 5) == observation_distance(5, 2)
    feats = {0: [0.0, 1.0], 1: [0.0, 2.0]}
    assert observation_distance(0, 1, feature_fn=feats.__getitem__) == 1.0


def test_identical_trajectories_neighbor_selection():
    trajs = [_traj([0, 1, 2], [0, 1]) for _ in range(4)]
    data = Dataset(trajs, 3, 2, 1.0)
    events = find_k_nearest(data, 0, 1, 3)
    # all distances zero: lower indices first, matching step selected
    assert events == [(1, 1), (2, 1), (3, 1)]


def test_self_never_a_neighbor():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 12, seed=2)
    for i in range(12):
        events = find_k_nearest(data, i, 0, 5)
        assert all(k != i for k, _ in events)


def test_k_must_be_smaller_than_n():
    trajs = [_traj([0, 0], [0]) for _ in range(3)]
    data = Dataset(trajs, 1, 1, 1.0)
    with pytest.raises(ValueError):
        find_k_nearest(data, 0, 0, 3)


def test_fast_index_matches_per_query_search():
    rng = np.random.default_rng(10)
    for trial in range(20):
        n = 12
        trajs = []
        for _ in range(n):
            ln = int(rng.integers(1, 5))
            trajs.append(_traj(rng.integers(0, 4, size=ln + 1).tolist(),
                               rng.integers(0, 2, size=ln).tolist()))
        data = Dataset(trajs, 4, 2, 1.0)
        k = int(rng.integers(1, 5))
        index = build_neighbor_index(data, k)
        for i, traj in enumerate(data.trajectories):
            for t in range(len(traj)):
                assert index.entries[(i, t)] == find_k_nearest(data, i, t, k), \
                    (trial, i, t)


def test_averaged_reward():
    values = [np.array([0.2, 0.0]), np.array([0.0, 0.4])]
    assert averaged_reward(values, [(0, 0), (1, 1)]) == pytest.approx(0.3)
    assert averaged_reward(values, [(0, 0)]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        averaged_reward(values, [])


def test_matrix_row_structure():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 10, seed=4)
    k = 3
    index = build_neighbor_index(data, k)
    mat = build_matrix(index, data)
    dense = mat.matrix.toarray()
    assert dense.shape[0] == len(index.entries)
    counts = (dense > 0).sum(axis=1)
    assert (counts == k).all()
    assert np.allclose(dense.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(dense[dense > 0], 1.0 / k)


def test_k1_matrix_is_selection():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 8, seed=7)
    mat = build_matrix(build_neighbor_index(data, 1), data)
    dense = mat.matrix.toarray()
    assert set(np.unique(dense)) <= {0.0, 1.0}
    assert (dense.sum(axis=1) == 1.0).all()


def test_matrix_equals_loop_averaging():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 15, seed=1)
    rng = np.random.default_rng(3)
    values = [rng.normal(size=len(t)) for t in data.trajectories]
    index = build_neighbor_index(data, 4)
    mat = build_matrix(index, data)
    applied = mat.apply(values)
    for r, key in enumerate(mat.rows):
        assert applied[r] == pytest.approx(
            averaged_reward(values, index.entries[key]), abs=1e-12)


def test_reconstruct_gating():
    trajs = [_traj([0, 1, 0], [0, 0]), _traj([0, 1, 0], [0, 1]),
             _traj([1, 0, 1], [1, 0])]
    data = Dataset(trajs, 2, 2, 1.0)
    values = [np.array([1.0, 2.0]), np.array([3.0, 4.0]),
              np.array([5.0, 6.0])]
    index = build_neighbor_index(data, 2)
    # empty critical set: reconstruction is the preliminary values
    out = reconstruct(data, values, set(), index)
    for got, want in zip(out, values):
        assert np.array_equal(got, want)
    # observation 1 critical: only steps visiting it are averaged
    out = reconstruct(data, values, {1}, index)
    assert out[0][0] == values[0][0]
    ev = index.entries[(0, 1)]
    assert out[0][1] == pytest.approx(np.mean([values[k][t] for k, t in ev]))


def test_reconstruct_requires_index_coverage():
    trajs = [_traj([0, 0], [0]), _traj([0, 0], [0])]
    data = Dataset(trajs, 1, 1, 1.0)
    values = [np.zeros(1), np.zeros(1)]
    with pytest.raises(KeyError):
        reconstruct(data, values, {0}, NeighborIndex(k=1, entries={}))


def test_reconstruction_stays_in_hull():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 25, seed=9)
    rng = np.random.default_rng(1)
    values = [rng.uniform(-1, 1, size=len(t)) for t in data.trajectories]
    index = build_neighbor_index(data, 5)
    critical = {o for t in data.trajectories for o in t.observations[:len(t)]}
    out = reconstruct(data, values, critical, index)
    lo = min(v.min() for v in values)
    hi = max(v.max() for v in values)
    for r in out:
        assert (r >= lo - 1e-12).all() and (r <= hi + 1e-12).all()


def test_index_json_roundtrip():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 8, seed=3)
    index = build_neighbor_index(data, 2)
    clone = NeighborIndex.from_json(index.to_json())
    assert clone.k == index.k
    assert clone.entries == {k: sorted(v) for k, v in index.entries.items()}
