"""Critical-observation detection from fitted Q-values.

An observation is critical when its fitted Q-values spread across
actions by more than a threshold h; h is either fixed, selected by the
elbow method on the sorted gap curve, or forced to "everything is
critical" (the short-horizon simulation setting).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .trajectory import Dataset, estimate_behavior_policy


@dataclass
class QTable:
    values: np.ndarray  # (n_obs, n_act)
    visited: np.ndarray  # bool (n_obs, n_act)
    fit_meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        pairs = {}
        for o, a in zip(*np.nonzero(self.visited)):
            pairs[f"{int(o)},{int(a)}"] = float(self.values[o, a])
        return json.dumps({
            "n_obs": int(self.values.shape[0]),
            "n_act": int(self.values.shape[1]),
            "q": pairs,
            "fit_meta": self.fit_meta,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QTable":
        data = json.loads(text)
        values = np.zeros((data["n_obs"], data["n_act"]))
        visited = np.zeros_like(values, dtype=bool)
        for key, v in data["q"].items():
            o, a = (int(x) for x in key.split(","))
            values[o, a] = v
            visited[o, a] = True
        return cls(values, visited, data.get("fit_meta", {}))


@dataclass
class CriticalSet:
    observations: frozenset[int]
    threshold: float

    def __contains__(self, obs: int) -> bool:
        return obs in self.observations

    def to_json(self) -> str:
        return json.dumps({
            "threshold": self.threshold,
            "observations": sorted(self.observations),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CriticalSet":
        data = json.loads(text)
        return cls(frozenset(data["observations"]), data["threshold"])


def fit_q(dataset: Dataset, rewards: list[np.ndarray],
          gamma: float | None = None, sweeps: int = 1000,
          tol: float = 1e-8, policy: np.ndarray | None = None,
          optimal_backup: bool = False,
          smoothing: float = 0.0) -> QTable:
    """Tabular fitted Q-evaluation on batch data.

    Each sweep replaces Q(o, a) by the mean over matching transitions of
    r + gamma * sum_a' pi(a'|o') Q(o', a') (or max_a' with
    ``optimal_backup``).  A trajectory's final transition contributes no
    continuation.  ``policy`` defaults to the cloned behavior policy.
    """
    if gamma is None:
        gamma = dataset.gamma
    flat = dataset.flat_transitions()
    r = np.concatenate([np.asarray(v, dtype=np.float64) for v in rewards])
    if r.shape[0] != flat["obs"].shape[0]:
        raise ValueError("rewards must cover every transition")
    if policy is None and not optimal_backup:
        policy = estimate_behavior_policy(dataset, smoothing=smoothing)

    n_pairs = dataset.n_obs * dataset.n_act
    pair = flat["obs"] * dataset.n_act + flat["act"]
    counts = np.bincount(pair, minlength=n_pairs).astype(np.float64)
    visited = counts > 0
    safe_counts = np.where(visited, counts, 1.0)
    cont_mask = (~flat["last"]).astype(np.float64)

    q = np.zeros(n_pairs)
    deltas = []
    iterations = 0
    for iterations in range(1, sweeps + 1):
        q2d = q.reshape(dataset.n_obs, dataset.n_act)
        if optimal_backup:
            v = q2d.max(axis=1)
        else:
            v = (policy * q2d).sum(axis=1)
        target = r + gamma * cont_mask * v[flat["next_obs"]]
        new_q = np.bincount(pair, weights=target, minlength=n_pairs)
        new_q = new_q / safe_counts
        delta = float(np.abs(new_q - q).max())
        deltas.append(delta)
        q = new_q
        if delta < tol:
            break
    return QTable(
        q.reshape(dataset.n_obs, dataset.n_act),
        visited.reshape(dataset.n_obs, dataset.n_act),
        {"sweeps": iterations, "residual": deltas[-1] if deltas else 0.0,
         "deltas": deltas,
         "backup": "optimal" if optimal_backup else "policy"},
    )


def q_gap(q: QTable, observation: int) -> float:
    """Largest spread of Q across actions; 0 for unvisited observations."""
    row_visited = q.visited[observation]
    if not row_visited.any():
        return 0.0
    vals = q.values[observation][row_visited]
    return float(vals.max() - vals.min())


def all_gaps(q: QTable) -> np.ndarray:
    return np.array([q_gap(q, o) for o in range(q.values.shape[0])])


def select_threshold_elbow(gaps) -> float:
    """Knee of the sorted non-increasing gap curve.

    The knee is the point with the largest perpendicular distance above
    the chord joining the curve's endpoints; its gap value is returned
    as the threshold.  Degenerate (collinear or tiny) curves fall back
    to h = 0, i.e. every visited observation is critical.
    """
    gaps = np.sort(np.asarray(gaps, dtype=np.float64))[::-1]
    n = gaps.shape[0]
    if n < 3:
        warnings.warn("fewer than 3 observations; using h=0 (all critical)")
        return 0.0
    x = np.arange(n, dtype=np.float64)
    dx, dy = n - 1.0, gaps[-1] - gaps[0]
    # signed area: positive when the point lies above the chord
    signed = (gaps - gaps[0]) * dx - x * dy
    norm = np.hypot(dx, dy)
    signed = signed / norm
    best = int(np.argmax(signed))
    if signed[best] <= 1e-12:
        warnings.warn("gap curve has no knee (collinear); using h=0")
        return 0.0
    return float(gaps[best])


def critical_set(q: QTable, h: float) -> CriticalSet:
    """Observations whose Q-gap strictly exceeds h."""
    gaps = all_gaps(q)
    obs = frozenset(int(o) for o in np.flatnonzero(gaps > h))
    return CriticalSet(obs, float(h))


def all_critical_set(dataset: Dataset) -> CriticalSet:
    """Simulation-mode set: every observation seen in the data."""
    obs = frozenset(int(o) for traj in dataset.trajectories
                    for o in traj.observations[:len(traj)])
    return CriticalSet(obs, float("-inf"))
