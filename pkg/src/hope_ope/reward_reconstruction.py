"""Infer preliminary per-step rewards from aggregated rewards.

Each trajectory contributes one row of a sparse design matrix whose
column for the observation-action pair (o, a) holds
sum_t gamma**(t-1) * 1[(o_t, a_t) == (o, a)].  Minimizing

    (1/N) sum_i (agg_i - x_i . theta)**2 + ridge * ||theta||**2

over the table theta is an exact linear least-squares problem in the
tabular setting, solved either in closed form (regularized normal
equations) or by full-batch gradient descent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .trajectory import Dataset


class UnderdeterminedError(ValueError):
    """Raised when the unregularized normal equations are singular."""


@dataclass
class RewardModel:
    """Fitted per-(observation, action) preliminary reward table.

    Unseen pairs predict 0.
    """

    table: dict[tuple[int, int], float]
    n_obs: int
    n_act: int
    fit_meta: dict = field(default_factory=dict)

    def predict(self, observation: int, action: int) -> float:
        return self.table.get((observation, action), 0.0)

    def predict_trajectories(self, dataset: Dataset) -> list[np.ndarray]:
        """Per-step preliminary reward arrays, one per trajectory."""
        dense = np.zeros(self.n_obs * self.n_act)
        for (o, a), v in self.table.items():
            dense[o * self.n_act + a] = v
        out = []
        for traj in dataset.trajectories:
            pair = (np.asarray(traj.observations[:len(traj)]) * self.n_act
                    + np.asarray(traj.actions))
            out.append(dense[pair])
        return out

    def to_json(self) -> str:
        return json.dumps({
            "n_obs": self.n_obs,
            "n_act": self.n_act,
            "table": {f"{o},{a}": v for (o, a), v in sorted(self.table.items())},
            "fit_meta": self.fit_meta,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RewardModel":
        data = json.loads(text)
        table = {}
        for key, v in data["table"].items():
            o, a = key.split(",")
            table[(int(o), int(a))] = v
        return cls(table, data["n_obs"], data["n_act"], data.get("fit_meta", {}))


def _design_matrix(dataset: Dataset, gamma: float):
    """Sparse N x P design matrix over the pairs seen in the data."""
    flat = dataset.flat_transitions()
    pair_ids = flat["obs"] * dataset.n_act + flat["act"]
    seen = np.unique(pair_ids)
    col_of = {int(p): j for j, p in enumerate(seen)}
    cols = np.array([col_of[int(p)] for p in pair_ids])
    vals = gamma ** flat["step"].astype(np.float64)
    x = scipy.sparse.csr_matrix(
        (vals, (flat["traj"], cols)), shape=(len(dataset), len(seen)))
    return x, seen


def _objective(x, y, theta, ridge):
    resid = x @ theta - y
    return float(resid @ resid / len(y) + ridge * theta @ theta)


def fit_preliminary(dataset: Dataset, gamma: float | None = None,
                    solver: str = "closed_form",
                    ridge: float = 1e-6,
                    max_iter: int = 10_000,
                    tol: float = 1e-8) -> RewardModel:
    """Fit the preliminary reward table from aggregated rewards."""
    if gamma is None:
        gamma = dataset.gamma
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if any(t.aggregated_reward is None for t in dataset.trajectories):
        raise ValueError("aggregated rewards required on all trajectories")
    x, seen = _design_matrix(dataset, gamma)
    y = dataset.padded()["agg"]
    n = len(dataset)

    if solver == "closed_form":
        gram = (x.T @ x).toarray() / n + ridge * np.eye(len(seen))
        rhs = x.T @ y / n
        if ridge == 0.0:
            # rank check before solving: singular => caller must raise ridge
            if np.linalg.matrix_rank(gram) < gram.shape[0]:
                raise UnderdeterminedError(
                    "normal equations are singular with ridge=0; "
                    "raise the ridge penalty")
        theta = np.linalg.solve(gram, rhs)
        iterations = 0
    elif solver == "iterative":
        # fixed step 1/L, L = 2 * (sigma_max(X)^2 / N + ridge)
        sigma = scipy.sparse.linalg.svds(
            x.astype(np.float64), k=1,
            return_singular_vectors=False)[0] if min(x.shape) > 1 else \
            np.linalg.norm(x.toarray())
        lipschitz = 2.0 * (float(sigma) ** 2 / n + ridge)
        step = 1.0 / lipschitz
        theta = np.zeros(len(seen))
        prev = _objective(x, y, theta, ridge)
        iterations = 0
        for iterations in range(1, max_iter + 1):
            grad = 2.0 / n * (x.T @ (x @ theta - y)) + 2.0 * ridge * theta
            theta = theta - step * grad
            cur = _objective(x, y, theta, ridge)
            if prev > 0 and abs(prev - cur) / max(prev, 1e-300) < tol:
                prev = cur
                break
            prev = cur
    else:
        raise ValueError(f"unknown solver {solver!r}")

    table = {(int(p) // dataset.n_act, int(p) % dataset.n_act): float(v)
             for p, v in zip(seen, theta)}
    model = RewardModel(table, dataset.n_obs, dataset.n_act, {
        "solver": solver,
        "ridge": ridge,
        "iterations": iterations,
        "final_loss": _objective(x, y, theta, 0.0),
    })
    return model


def objective_gradient(dataset: Dataset, model: RewardModel,
                       gamma: float | None = None,
                       ridge: float = 0.0) -> dict[tuple[int, int], float]:
    """Analytic gradient of the fit objective at the model's table."""
    if gamma is None:
        gamma = dataset.gamma
    x, seen = _design_matrix(dataset, gamma)
    theta = np.array([model.predict(int(p) // dataset.n_act,
                                    int(p) % dataset.n_act) for p in seen])
    y = dataset.padded()["agg"]
    grad = 2.0 / len(dataset) * (x.T @ (x @ theta - y)) + 2.0 * ridge * theta
    return {(int(p) // dataset.n_act, int(p) % dataset.n_act): float(g)
            for p, g in zip(seen, grad)}


def loss(model: RewardModel, dataset: Dataset,
         gamma: float | None = None) -> float:
    """Mean squared aggregated-reward residual (no ridge term)."""
    if gamma is None:
        gamma = dataset.gamma
    total = 0.0
    for traj in dataset.trajectories:
        pred = sum(gamma ** t * model.predict(traj.observations[t],
                                              traj.actions[t])
                   for t in range(len(traj)))
        total += (traj.aggregated_reward - pred) ** 2
    return total / len(dataset)
