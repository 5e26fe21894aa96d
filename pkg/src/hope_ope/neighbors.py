"""Trajectory neighbors and neighbor-averaged reward reconstruction.

Two trajectories are close when their observation and action visitation
distributions are close in (asymmetric) KL divergence; per step, the
single most similar observation on each of the K nearest trajectories
becomes a neighbor event.  Averaging preliminary rewards over those
events calibrates the reward on critical observations.

``find_k_nearest`` is the literal per-query algorithm (used as the
oracle); ``build_neighbor_index`` computes identical results for a
whole dataset with vectorized per-trajectory distance sweeps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from .trajectory import Dataset, Trajectory

KL_EPSILON = 1e-6


def _support_counts(symbols, n: int) -> np.ndarray:
    phi = np.bincount(symbols, minlength=n).astype(np.float64)
    return phi / phi.sum()


def _kl_union_smoothed(phi_from: dict[int, float],
                       phi_to: dict[int, float],
                       eps: float = KL_EPSILON) -> float:
    """KL(phi_from || phi_to) with add-eps smoothing over the union support.

    Both distributions gain eps on every union-support symbol and are
    renormalized; the shared normalizer cancels inside the log ratio.
    """
    support = set(phi_from) | set(phi_to)
    z = 1.0 + eps * len(support)
    total = 0.0
    for m in support:
        p = (phi_from.get(m, 0.0) + eps) / z
        q = (phi_to.get(m, 0.0) + eps) / z
        total += p * np.log(p / q)
    return total


def _visit_dict(symbols) -> dict[int, float]:
    out: dict[int, float] = {}
    w = 1.0 / len(symbols)
    for s in symbols:
        out[s] = out.get(s, 0.0) + w
    return out


def trajectory_distance(a: Trajectory, b: Trajectory) -> float:
    """KL(obs_b || obs_a) + KL(act_b || act_a) over smoothed visitations."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("trajectories must be nonempty")
    d_obs = _kl_union_smoothed(_visit_dict(b.observations[:len(b)]),
                               _visit_dict(a.observations[:len(a)]))
    d_act = _kl_union_smoothed(_visit_dict(b.actions), _visit_dict(a.actions))
    return d_obs + d_act


def observation_distance(a: int, b: int, feature_fn=None) -> float:
    """Euclidean distance between observation feature vectors.

    Without a feature function the raw id is the (1-D) feature; the
    sepsis environment supplies its decoded ordinal features.
    """
    if feature_fn is None:
        return float(abs(a - b))
    return float(np.linalg.norm(np.asarray(feature_fn(a), dtype=np.float64)
                                - np.asarray(feature_fn(b), dtype=np.float64)))


@dataclass
class NeighborIndex:
    """K neighbor events (trajectory k, step t') per queried (i, t)."""

    k: int
    entries: dict[tuple[int, int], list[tuple[int, int]]] = field(
        default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k,
            "entries": {f"{i},{t}": sorted(ev)
                        for (i, t), ev in sorted(self.entries.items())},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NeighborIndex":
        data = json.loads(text)
        entries = {}
        for key, ev in data["entries"].items():
            i, t = key.split(",")
            entries[(int(i), int(t))] = [tuple(e) for e in ev]
        return cls(data["k"], entries)


def _nearest_step(query_feat: np.ndarray, feats: np.ndarray) -> int:
    """Earliest step minimizing Euclidean feature distance."""
    d = np.linalg.norm(feats - query_feat, axis=1)
    return int(np.argmin(d))


def _feature_rows(dataset: Dataset, feature_fn):
    """Feature vector per distinct observation id seen in the dataset."""
    seen = sorted({o for traj in dataset.trajectories
                   for o in traj.observations[:len(traj)]})
    if feature_fn is None:
        table = {o: np.array([float(o)]) for o in seen}
    else:
        table = {o: np.asarray(feature_fn(o), dtype=np.float64) for o in seen}
    return table


def find_k_nearest(dataset: Dataset, i: int, t: int, k: int,
                   feature_fn=None) -> list[tuple[int, int]]:
    """K nearest neighbor events of observation t on trajectory i.

    Trajectories are ranked by distance (ties broken by lower index),
    the query's own trajectory excluded; on each neighbor the earliest
    observation closest to o_t is selected.
    """
    n = len(dataset)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the dataset size {n}")
    query = dataset.trajectories[i]
    dists = [
        (trajectory_distance(query, dataset.trajectories[j]), j)
        for j in range(n) if j != i
    ]
    dists.sort()
    feats = _feature_rows(dataset, feature_fn)
    q_feat = feats[query.observations[t]]
    events = []
    for _, j in dists[:k]:
        neighbor = dataset.trajectories[j]
        nb_feats = np.stack([feats[o]
                             for o in neighbor.observations[:len(neighbor)]])
        events.append((j, _nearest_step(q_feat, nb_feats)))
    return events


# -- vectorized whole-dataset index -------------------------------------------


def _phi_matrix(dataset: Dataset, what: str) -> scipy.sparse.csc_matrix:
    rows, cols, vals = [], [], []
    for i, traj in enumerate(dataset.trajectories):
        symbols = (traj.observations[:len(traj)] if what == "obs"
                   else traj.actions)
        w = 1.0 / len(symbols)
        acc: dict[int, float] = {}
        for s in symbols:
            acc[s] = acc.get(s, 0.0) + w
        for s, v in acc.items():
            rows.append(i)
            cols.append(s)
            vals.append(v)
    n_cols = dataset.n_obs if what == "obs" else dataset.n_act
    return scipy.sparse.csc_matrix(
        (vals, (rows, cols)), shape=(len(dataset), n_cols))


class _KLSweep:
    """Per-query-trajectory KL(phi_k || phi_i) against all k, vectorized.

    Uses the closed form of the union-support smoothed KL: only sums
    over the query's own support vary per candidate, and those are
    accumulated from sparse columns of the visitation matrix.
    """

    def __init__(self, phi: scipy.sparse.csc_matrix, eps: float = KL_EPSILON):
        self.phi = phi
        self.eps = eps
        csr = phi.tocsr()
        self.support_size = np.diff(csr.indptr).astype(np.float64)
        with np.errstate(divide="ignore"):
            data = csr.data + eps
            self.self_entropy = np.zeros(phi.shape[0])
            prod = data * np.log(data)
            np.add.at(self.self_entropy,
                      np.repeat(np.arange(phi.shape[0]), np.diff(csr.indptr)),
                      prod)
        self.csr = csr

    def distances_from(self, i: int) -> np.ndarray:
        eps = self.eps
        log_eps = np.log(eps)
        n = self.phi.shape[0]
        b = np.zeros(n)
        c = np.zeros(n)
        inter = np.zeros(n)
        row = self.csr[i]
        s_i = float(self.support_size[i])
        b_const = 0.0
        indptr, col_rows, col_data = (self.phi.indptr, self.phi.indices,
                                      self.phi.data)
        for m, g in zip(row.indices, row.data):
            lo, hi = indptr[m], indptr[m + 1]
            rows_m, vals_m = col_rows[lo:hi], col_data[lo:hi]
            lg = np.log(g + eps)
            b_const += lg
            b[rows_m] += vals_m * lg
            c[rows_m] += vals_m
            inter[rows_m] += 1.0
        union = s_i + self.support_size - inter
        z = 1.0 + eps * union
        num = (self.self_entropy
               + (union - self.support_size) * eps * log_eps
               - b - eps * b_const
               - log_eps * (1.0 + eps * union - eps * s_i - c))
        return num / z


def build_neighbor_index(dataset: Dataset, k: int, feature_fn=None,
                         steps: dict[int, list[int]] | None = None
                         ) -> NeighborIndex:
    """Neighbor events for every requested (trajectory, step).

    ``steps`` restricts the queries (e.g. to critical steps only);
    ``None`` indexes every step of every trajectory.  Matches
    :func:`find_k_nearest` exactly, including tie-breaking.
    """
    n = len(dataset)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the dataset size {n}")
    if steps is None:
        steps = {i: list(range(len(t)))
                 for i, t in enumerate(dataset.trajectories)}
    sweep_obs = _KLSweep(_phi_matrix(dataset, "obs"))
    sweep_act = _KLSweep(_phi_matrix(dataset, "act"))
    obs_dicts = [_visit_dict(t.observations[:len(t)])
                 for t in dataset.trajectories]
    act_dicts = [_visit_dict(t.actions) for t in dataset.trajectories]
    feats = _feature_rows(dataset, feature_fn)
    feat_stack = {
        j: np.stack([feats[o] for o in traj.observations[:len(traj)]])
        for j, traj in enumerate(dataset.trajectories)
    }
    index = NeighborIndex(k=k)
    for i, query_steps in sorted(steps.items()):
        if not query_steps:
            continue
        d = sweep_obs.distances_from(i) + sweep_act.distances_from(i)
        d[i] = np.inf
        # the sweep's closed-form arithmetic can disagree with the naive
        # sum by a few ulps, so shortlist generously and re-rank the
        # shortlist with the exact per-pair computation and tie-breaking
        kth = np.partition(d, k - 1)[k - 1]
        margin = 1e-9 * (1.0 + abs(kth))
        shortlist = np.flatnonzero(d <= kth + margin)
        exact = sorted(
            (_kl_union_smoothed(obs_dicts[j], obs_dicts[i])
             + _kl_union_smoothed(act_dicts[j], act_dicts[i]), int(j))
            for j in shortlist)
        order = [j for _, j in exact[:k]]
        traj = dataset.trajectories[i]
        for t in query_steps:
            q_feat = feats[traj.observations[t]]
            index.entries[(i, t)] = [
                (int(j), _nearest_step(q_feat, feat_stack[int(j)]))
                for j in order
            ]
    return index


# -- averaging and reconstruction ---------------------------------------------


def averaged_reward(values: list[np.ndarray],
                    events: list[tuple[int, int]]) -> float:
    """Mean of per-event preliminary rewards over the neighbor events."""
    if not events:
        raise ValueError("neighbor event set is empty")
    return float(np.mean([values[k][t] for k, t in events]))


def _event_values(dataset: Dataset, preliminary) -> list[np.ndarray]:
    """Per-(trajectory, step) preliminary reward arrays.

    ``preliminary`` is either a fitted reward model (anything with
    ``predict_trajectories``) or an already-materialized list of arrays.
    """
    if hasattr(preliminary, "predict_trajectories"):
        return preliminary.predict_trajectories(dataset)
    return [np.asarray(v, dtype=np.float64) for v in preliminary]


def reconstruct(dataset: Dataset, preliminary, critical,
                index: NeighborIndex) -> list[np.ndarray]:
    """Reconstructed rewards: neighbor average on critical observations,
    the preliminary value elsewhere."""
    values = _event_values(dataset, preliminary)
    critical_ids = set(getattr(critical, "observations", critical))
    out = []
    for i, traj in enumerate(dataset.trajectories):
        rhat = values[i].copy()
        for t in range(len(traj)):
            if traj.observations[t] in critical_ids:
                events = index.entries.get((i, t))
                if events is None:
                    raise KeyError(
                        f"no neighbor index entry for critical step ({i}, {t})")
                rhat[t] = averaged_reward(values, events)
        out.append(rhat)
    return out


@dataclass
class AveragingMatrix:
    """Sparse neighbor-averaging matrix (rows: queried events, columns:
    all dataset events in (trajectory, step) order)."""

    matrix: scipy.sparse.csr_matrix
    rows: list[tuple[int, int]]
    event_offset: list[int]  # cumulative event count per trajectory

    def apply(self, values: list[np.ndarray]) -> np.ndarray:
        flat = np.concatenate([np.asarray(v, dtype=np.float64)
                               for v in values])
        return self.matrix @ flat


def build_matrix(index: NeighborIndex, dataset: Dataset) -> AveragingMatrix:
    """Sparse matrix form of the neighbor averaging."""
    offsets = np.concatenate([
        [0], np.cumsum([len(t) for t in dataset.trajectories])
    ]).astype(int)
    rows_keys = sorted(index.entries)
    rows, cols, vals = [], [], []
    for r, key in enumerate(rows_keys):
        events = index.entries[key]
        w = 1.0 / len(events)
        for k, t in events:
            rows.append(r)
            cols.append(offsets[k] + t)
            vals.append(w)
    matrix = scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(len(rows_keys), int(offsets[-1])))
    return AveragingMatrix(matrix, rows_keys, list(offsets))
