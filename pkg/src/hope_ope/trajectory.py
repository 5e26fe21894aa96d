"""Trajectory and dataset data model for aggregated-reward OPE.

A trajectory stores the observable channel (observations, actions,
optionally per-step rewards) plus a single aggregated reward.  When data
comes from the simulator, the true immediate rewards travel in a
separate ground-truth sidecar channel that is never visible to the
estimators unless explicitly requested.

Datasets are immutable after construction/load; derived numpy views are
cached on first use and shared by all readers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Transition:
    observation: int
    action: int
    reward: float | None
    next_observation: int


@dataclass
class Trajectory:
    """One episode.

    ``observations`` has length ``T + 1`` (it includes the observation
    reached after the last action), ``actions`` has length ``T``.
    ``rewards`` is the observable per-step channel and is ``None`` in
    human-centric mode; ``ground_truth_rewards`` is simulator-only.
    """

    observations: list[int]
    actions: list[int]
    rewards: list[float] | None
    aggregated_reward: float
    ground_truth_rewards: list[float] | None = None
    behavior_probs: list[float] | None = None

    def __post_init__(self):
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError(
                "observations must have exactly one more entry than actions"
            )
        for name in ("rewards", "ground_truth_rewards", "behavior_probs"):
            seq = getattr(self, name)
            if seq is not None and len(seq) != len(self.actions):
                raise ValueError(f"{name} length must match actions")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def transitions(self) -> list[Transition]:
        rew = self.rewards if self.rewards is not None else [None] * len(self)
        return [
            Transition(self.observations[t], self.actions[t], rew[t],
                       self.observations[t + 1])
            for t in range(len(self))
        ]


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    n_obs: int
    n_act: int
    gamma: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.trajectories)

    def validate(self) -> None:
        if not self.trajectories:
            raise ValueError("dataset must contain at least one trajectory")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        for i, traj in enumerate(self.trajectories):
            if any(not 0 <= o < self.n_obs for o in traj.observations):
                raise ValueError(f"trajectory {i}: observation out of range")
            if any(not 0 <= a < self.n_act for a in traj.actions):
                raise ValueError(f"trajectory {i}: action out of range")
            if traj.ground_truth_rewards is not None:
                agg = discounted_return(traj.ground_truth_rewards, self.gamma)
                if abs(agg - traj.aggregated_reward) > 1e-9:
                    raise ValueError(
                        f"trajectory {i}: aggregated reward {traj.aggregated_reward} "
                        f"does not match discounted ground truth {agg}"
                    )

    # -- cached array views -------------------------------------------------

    @property
    def max_len(self) -> int:
        return max(len(t) for t in self.trajectories)

    def padded(self) -> dict[str, np.ndarray]:
        """Padded (N, Tmax) views: obs, act, mask, lengths, agg, beta.

        ``beta`` is None when any trajectory lacks stored behavior probs.
        Padding cells carry obs/act 0 and mask False.
        """
        if "padded" in self._cache:
            return self._cache["padded"]
        n, tmax = len(self), self.max_len
        obs = np.zeros((n, tmax), dtype=np.int64)
        act = np.zeros((n, tmax), dtype=np.int64)
        mask = np.zeros((n, tmax), dtype=bool)
        lengths = np.zeros(n, dtype=np.int64)
        agg = np.zeros(n, dtype=np.float64)
        have_beta = all(t.behavior_probs is not None for t in self.trajectories)
        beta = np.ones((n, tmax), dtype=np.float64) if have_beta else None
        for i, traj in enumerate(self.trajectories):
            ln = len(traj)
            lengths[i] = ln
            obs[i, :ln] = traj.observations[:ln]
            act[i, :ln] = traj.actions
            mask[i, :ln] = True
            agg[i] = traj.aggregated_reward
            if have_beta:
                beta[i, :ln] = traj.behavior_probs
        out = {"obs": obs, "act": act, "mask": mask, "lengths": lengths,
               "agg": agg, "beta": beta}
        self._cache["padded"] = out
        return out

    def flat_transitions(self) -> dict[str, np.ndarray]:
        """Flat transition arrays: traj, step, obs, act, next_obs, last."""
        if "flat" in self._cache:
            return self._cache["flat"]
        traj_idx, step, obs, act, nxt, last = [], [], [], [], [], []
        for i, traj in enumerate(self.trajectories):
            for t in range(len(traj)):
                traj_idx.append(i)
                step.append(t)
                obs.append(traj.observations[t])
                act.append(traj.actions[t])
                nxt.append(traj.observations[t + 1])
                last.append(t == len(traj) - 1)
        out = {
            "traj": np.asarray(traj_idx, dtype=np.int64),
            "step": np.asarray(step, dtype=np.int64),
            "obs": np.asarray(obs, dtype=np.int64),
            "act": np.asarray(act, dtype=np.int64),
            "next_obs": np.asarray(nxt, dtype=np.int64),
            "last": np.asarray(last, dtype=bool),
        }
        self._cache["flat"] = out
        return out


# -- aggregated-reward bookkeeping ------------------------------------------


def discounted_return(rewards, gamma: float) -> float:
    return float(sum(gamma ** t * r for t, r in enumerate(rewards)))


def aggregate_rewards(trajectory: Trajectory, gamma: float,
                      window: int | None = None) -> list[float]:
    """Aggregated reward per completed window of ground-truth rewards.

    Within a window the discount exponent is the offset from the window
    start, so the default whole-episode window reduces to the usual
    end-of-episode aggregate sum(gamma**(t-1) * r_t).
    """
    if trajectory.ground_truth_rewards is None:
        raise ValueError("ground-truth rewards are required to aggregate")
    rewards = trajectory.ground_truth_rewards
    if window is None:
        window = len(rewards)
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for start in range(0, len(rewards), window):
        chunk = rewards[start:start + window]
        if len(chunk) == window or start + len(chunk) == len(rewards):
            out.append(discounted_return(chunk, gamma))
    return out


def strip_rewards(dataset: Dataset) -> tuple[Dataset, list[list[float]]]:
    """Clear per-step reward channels, keeping aggregated rewards.

    Returns the stripped dataset plus the ground-truth sidecar (one
    reward list per trajectory) as a separate evaluation-only artifact.
    """
    sidecar = []
    stripped = []
    for traj in dataset.trajectories:
        gt = traj.ground_truth_rewards
        sidecar.append(list(gt) if gt is not None else None)
        stripped.append(replace(traj, rewards=None, ground_truth_rewards=None))
    return (
        Dataset(stripped, dataset.n_obs, dataset.n_act, dataset.gamma),
        sidecar,
    )


def attach_ground_truth(dataset: Dataset, sidecar: list[list[float]]) -> Dataset:
    """Inverse of :func:`strip_rewards` (rewards channel restored from sidecar)."""
    if len(sidecar) != len(dataset):
        raise ValueError("sidecar length must match dataset")
    restored = []
    for traj, gt in zip(dataset.trajectories, sidecar):
        restored.append(replace(
            traj,
            rewards=list(gt) if gt is not None else None,
            ground_truth_rewards=list(gt) if gt is not None else None,
        ))
    return Dataset(restored, dataset.n_obs, dataset.n_act, dataset.gamma)


# -- behavior-policy estimation and visitation -------------------------------


def estimate_behavior_policy(dataset: Dataset, smoothing: float = 0.0) -> np.ndarray:
    """Tabular behavior cloning.

    beta(a|o) = (count(o, a) + smoothing) / (count(o) + smoothing * |A|);
    rows for unseen observations are uniform.
    """
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    counts = np.zeros((dataset.n_obs, dataset.n_act), dtype=np.float64)
    flat = dataset.flat_transitions()
    np.add.at(counts, (flat["obs"], flat["act"]), 1.0)
    totals = counts.sum(axis=1)
    policy = np.full((dataset.n_obs, dataset.n_act), 1.0 / dataset.n_act)
    seen = totals > 0
    denom = totals[seen] + smoothing * dataset.n_act
    policy[seen] = (counts[seen] + smoothing) / denom[:, None]
    return policy


def visitation_distribution(trajectory: Trajectory, n_obs: int,
                            n_act: int) -> tuple[np.ndarray, np.ndarray]:
    """Empirical observation/action frequency vectors (each sums to 1)."""
    if len(trajectory) == 0:
        raise ValueError("trajectory must be nonempty")
    phi_o = np.bincount(trajectory.observations[:len(trajectory)],
                        minlength=n_obs).astype(np.float64)
    phi_a = np.bincount(trajectory.actions, minlength=n_act).astype(np.float64)
    return phi_o / phi_o.sum(), phi_a / phi_a.sum()


# -- serialization ------------------------------------------------------------

# Wire format (JSON Lines): header {"gamma":..,"n_act":..,"n_obs":..}
# then one line per trajectory {"act":[..],"agg":..,"beta":[..]|null,
# "obs":[.. T+1 ..],"rew":[..]|null}.  Keys are sorted so identical data
# serializes byte-identically.


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(_dumps({"n_obs": dataset.n_obs, "n_act": dataset.n_act,
                         "gamma": dataset.gamma}) + "\n")
        for traj in dataset.trajectories:
            fh.write(_dumps({
                "obs": traj.observations,
                "act": traj.actions,
                "rew": traj.rewards,
                "agg": traj.aggregated_reward,
                "beta": traj.behavior_probs,
            }) + "\n")


def load_jsonl(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        trajectories = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            trajectories.append(Trajectory(
                observations=rec["obs"],
                actions=rec["act"],
                rewards=rec["rew"],
                aggregated_reward=rec["agg"],
                behavior_probs=rec.get("beta"),
            ))
    return Dataset(trajectories, header["n_obs"], header["n_act"],
                   header["gamma"])


def save_sidecar(sidecar: list[list[float]], path) -> None:
    """Ground-truth reward sidecar: one {"rew": [...]} line per trajectory."""
    with open(path, "w") as fh:
        for rewards in sidecar:
            fh.write(_dumps({"rew": rewards}) + "\n")


def load_sidecar(path) -> list[list[float]]:
    with open(path) as fh:
        return [json.loads(line)["rew"] for line in fh if line.strip()]
