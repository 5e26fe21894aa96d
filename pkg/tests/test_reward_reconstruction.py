"""Preliminary reward fitting tests: oracles, solvers, gradients."""

import numpy as np
import pytest

from hope_ope.reward_reconstruction import (RewardModel, UnderdeterminedError,
                                            fit_preliminary, loss,
                                            objective_gradient)
from hope_ope.trajectory import Dataset, Trajectory

from mdp_fixture import behavior_policy, make_mdp


def _traj(obs, acts, agg):
    return Trajectory(obs, acts, None, float(agg))


def identifiable_dataset(n_obs=3, n_act=2, reps=4, seed=0, gamma=0.9):
    """Every pair carried by its own single-step trajectories plus a few
    longer ones: the design matrix has full column rank."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-1, 1, size=(n_obs, n_act))
    trajs = []
    for o in range(n_obs):
        for a in range(n_act):
            for _ in range(reps):
                trajs.append(_traj([o, 0], [a], theta[o, a]))
    for _ in range(6):
        obs = rng.integers(0, n_obs, size=4).tolist()
        acts = rng.integers(0, n_act, size=3).tolist()
        agg = sum(gamma ** t * theta[obs[t], acts[t]] for t in range(3))
        trajs.append(_traj(obs, acts, agg))
    return Dataset(trajs, n_obs, n_act, gamma), theta


def test_single_step_exact_recovery():
    data = Dataset([_traj([0, 0], [0], 0.5)], 1, 1, 1.0)
    model = fit_preliminary(data, ridge=0.0)
    assert model.predict(0, 0) == pytest.approx(0.5, abs=1e-12)


def test_predict_defaults_to_zero():
    model = RewardModel({(0, 0): 0.3}, 2, 2)
    assert model.predict(1, 1) == 0.0
    assert model.predict(0, 0) == 0.3


def test_hand_solved_two_pair_system():
    # two pairs, gamma=1: agg1 = a + b, agg2 = a  =>  a = 1, b = 2
    data = Dataset([
        _traj([0, 1, 0], [0, 0], 3.0),
        _traj([0, 0], [0], 1.0),
        _traj([1, 0], [0], 2.0),
    ], 2, 1, 1.0)
    model = fit_preliminary(data, ridge=0.0)
    assert model.predict(0, 0) == pytest.approx(1.0, abs=1e-9)
    assert model.predict(1, 0) == pytest.approx(2.0, abs=1e-9)
    for traj in data.trajectories:
        pred = sum(model.predict(traj.observations[t], traj.actions[t])
                   for t in range(len(traj)))
        assert pred == pytest.approx(traj.aggregated_reward, abs=1e-9)


def test_both_solvers_match_dense_oracle():
    data, _ = identifiable_dataset()
    x_rows, y = [], []
    pairs = sorted({(traj.observations[t], traj.actions[t])
                    for traj in data.trajectories
                    for t in range(len(traj))})
    col = {p: j for j, p in enumerate(pairs)}
    for traj in data.trajectories:
        row = np.zeros(len(pairs))
        for t in range(len(traj)):
            row[col[(traj.observations[t], traj.actions[t])]] += 0.9 ** t
        x_rows.append(row)
        y.append(traj.aggregated_reward)
    oracle = np.linalg.lstsq(np.asarray(x_rows), np.asarray(y), rcond=None)[0]
    for solver in ("closed_form", "iterative"):
        model = fit_preliminary(data, solver=solver, ridge=0.0)
        for p, j in col.items():
            assert model.predict(*p) == pytest.approx(oracle[j], abs=1e-6), \
                (solver, p)


def test_exact_data_recovers_theta():
    data, theta = identifiable_dataset(seed=3)
    model = fit_preliminary(data, ridge=0.0)
    for o in range(3):
        for a in range(2):
            assert model.predict(o, a) == pytest.approx(theta[o, a], abs=1e-8)


def test_underdetermined_raises_without_ridge():
    # two pairs always visited together: columns are linearly dependent
    data = Dataset([_traj([0, 1, 0], [0, 0], 1.0),
                    _traj([0, 1, 0], [0, 0], 1.0)], 2, 1, 1.0)
    with pytest.raises(UnderdeterminedError):
        fit_preliminary(data, ridge=0.0)
    model = fit_preliminary(data, ridge=1e-6)  # regularized solve succeeds
    assert np.isfinite(model.predict(0, 0))


def test_loss_zero_model_zero_targets():
    data = Dataset([_traj([0, 0], [0], 0.0)], 1, 1, 1.0)
    assert loss(RewardModel({}, 1, 1), data) == 0.0


def test_fitted_loss_beats_zero_model():
    mdp = make_mdp()
    data = mdp.simulate(behavior_policy(), 150, seed=2)
    model = fit_preliminary(data)
    assert loss(model, data) <= loss(RewardModel({}, 5, 2), data)


def test_solver_losses_agree():
    data, _ = identifiable_dataset(seed=7)
    closed = fit_preliminary(data, solver="closed_form", ridge=0.0)
    iterative = fit_preliminary(data, solver="iterative", ridge=0.0)
    assert abs(loss(closed, data) - loss(iterative, data)) < 1e-6


def test_gradient_matches_central_differences():
    mdp = make_mdp(seed=4)
    data = mdp.simulate(behavior_policy(seed=4), 60, seed=8)
    rng = np.random.default_rng(5)
    pairs = sorted({(traj.observations[t], traj.actions[t])
                    for traj in data.trajectories
                    for t in range(len(traj))})
    table = {p: float(rng.uniform(-1, 1)) for p in pairs}
    model = RewardModel(dict(table), 5, 2)
    ridge = 1e-3
    grad = objective_gradient(data, model, ridge=ridge)
    eps = 1e-5
    for p in pairs:
        hi = RewardModel({**table, p: table[p] + eps}, 5, 2)
        lo = RewardModel({**table, p: table[p] - eps}, 5, 2)

        def full(m):
            theta_sq = sum(v * v for v in m.table.values())
            return loss(m, data) + ridge * theta_sq

        fd = (full(hi) - full(lo)) / (2 * eps)
        denom = max(abs(fd), abs(grad[p]), 1e-8)
        assert abs(grad[p] - fd) / denom < 1e-4, p


def test_model_json_roundtrip():
    data, _ = identifiable_dataset()
    model = fit_preliminary(data)
    clone = RewardModel.from_json(model.to_json())
    assert clone.table == model.table
    assert clone.n_obs == model.n_obs and clone.n_act == model.n_act
