"""OPE estimators sharing one importance-weight engine.

HOPE is weighted importance sampling over reconstructed per-step
rewards; the ablations swap the reconstruction (sparse preliminary
channel, neighbor averaging everywhere, random neighbor selection).
Baselines: IS, WIS, PDIS, PHWIS-Behavior, tabular FQE, DR and WDR.

Every estimator consumes a reward channel: a list of per-step reward
arrays, one per trajectory.  The sparse channel places the aggregated
reward on the final step; the reconstructed channel is produced by the
reconstruction pipeline; ground-truth is simulator-only.

``prepare_estimator`` returns a resample-aware closure so bootstrap
replicas reuse per-trajectory statistics instead of re-walking the
dataset.  Fitted models (Q tables, reconstructions) are held fixed
across replicas; only the episode resampling varies.
"""

from __future__ import annotations

import numpy as np

from .critical_obs import QTable, fit_q
from .neighbors import NeighborIndex, _event_values, _feature_rows, reconstruct
from .trajectory import Dataset, Trajectory


class SupportViolationError(ValueError):
    """Target policy puts mass where the behavior policy has none."""


class DegenerateWeightsError(ValueError):
    """All importance weights vanished; a weighted estimate is undefined."""


# -- reward channels ----------------------------------------------------------


def reward_channel(dataset: Dataset, channel: str,
                   rhat: list[np.ndarray] | None = None) -> list[np.ndarray]:
    if channel == "sparse":
        out = []
        for traj in dataset.trajectories:
            r = np.zeros(len(traj))
            r[-1] = traj.aggregated_reward
            out.append(r)
        return out
    if channel == "reconstructed":
        if rhat is None:
            raise ValueError("reconstructed channel requires rhat")
        return [np.asarray(r, dtype=np.float64) for r in rhat]
    if channel == "ground_truth":
        if any(t.ground_truth_rewards is None for t in dataset.trajectories):
            raise ValueError("dataset has no ground-truth sidecar")
        return [np.asarray(t.ground_truth_rewards, dtype=np.float64)
                for t in dataset.trajectories]
    if channel == "per_step":
        if any(t.rewards is None for t in dataset.trajectories):
            raise ValueError("dataset has no per-step reward channel")
        return [np.asarray(t.rewards, dtype=np.float64)
                for t in dataset.trajectories]
    raise ValueError(f"unknown reward channel {channel!r}")


def _padded_rewards(dataset: Dataset, rewards: list[np.ndarray]) -> np.ndarray:
    out = np.zeros((len(dataset), dataset.max_len))
    for i, r in enumerate(rewards):
        out[i, :len(r)] = r
    return out


def discounted_returns(dataset: Dataset, rewards: list[np.ndarray],
                       gamma: float) -> np.ndarray:
    padded = _padded_rewards(dataset, rewards)
    disc = gamma ** np.arange(padded.shape[1])
    return padded @ disc


# -- importance weights -------------------------------------------------------


def _step_probs(dataset: Dataset, policy: np.ndarray | None,
                stored: np.ndarray | None) -> np.ndarray:
    """(N, Tmax) per-step action probabilities; padding cells carry 1."""
    if policy is None:
        if stored is None:
            raise ValueError("no behavior policy given and none stored")
        return stored
    pad = dataset.padded()
    probs = np.asarray(policy)[pad["obs"], pad["act"]]
    return np.where(pad["mask"], probs, 1.0)


def step_ratios(dataset: Dataset, target: np.ndarray,
                behavior: np.ndarray | None = None) -> np.ndarray:
    """Per-step pi/beta ratios, padded with 1 beyond each length."""
    pad = dataset.padded()
    pi = _step_probs(dataset, target, None)
    beta = _step_probs(dataset, behavior, pad["beta"])
    bad = pad["mask"] & (beta == 0.0) & (pi > 0.0)
    if bad.any():
        i, t = np.argwhere(bad)[0]
        raise SupportViolationError(
            f"behavior probability is 0 at observation "
            f"{pad['obs'][i, t]}, action {pad['act'][i, t]} "
            f"(trajectory {i}, step {t}) while the target policy is not")
    ratios = np.where(pad["mask"] & (pi == 0.0), 0.0,
                      pi / np.where(beta == 0.0, 1.0, beta))
    return np.where(pad["mask"], ratios, 1.0)


def importance_weights(dataset: Dataset, target: np.ndarray,
                       behavior: np.ndarray | None = None) -> np.ndarray:
    """Per-trajectory sequential products of step ratios.

    The full weight is the final column of the cumulative per-step
    ratios, so w_i agrees bit for bit with the last per-decision weight.
    """
    ratios = step_ratios(dataset, target, behavior)
    return _cumulative_ratios(ratios)[:, -1]


def importance_weight(trajectory: Trajectory, target: np.ndarray,
                      behavior: np.ndarray | None = None) -> float:
    """Single-trajectory importance weight."""
    w = 1.0
    for t in range(len(trajectory)):
        o, a = trajectory.observations[t], trajectory.actions[t]
        pi = float(target[o, a])
        if behavior is None:
            if trajectory.behavior_probs is None:
                raise ValueError("no behavior policy given and none stored")
            beta = trajectory.behavior_probs[t]
        else:
            beta = float(behavior[o, a])
        if beta == 0.0:
            if pi == 0.0:
                return 0.0
            raise SupportViolationError(
                f"behavior probability is 0 at observation {o}, action {a} "
                f"while the target policy is not")
        if pi == 0.0:
            return 0.0
        w *= pi / beta
    return w


def _cumulative_ratios(ratios: np.ndarray) -> np.ndarray:
    """rho_{1:t} per step; padding ratios of 1 carry the final value."""
    return np.cumprod(ratios, axis=1)


# -- resample-aware kernels ----------------------------------------------------


def _mean_kernel(values: np.ndarray):
    def run(sel=None):
        v = values if sel is None else values[sel]
        return float(v.mean())
    return run


def _wis_kernel(weights: np.ndarray, returns: np.ndarray):
    def run(sel=None):
        w = weights if sel is None else weights[sel]
        g = returns if sel is None else returns[sel]
        total = w.sum()
        if total == 0.0:
            raise DegenerateWeightsError("sum of importance weights is 0")
        return float((w * g).sum() / total)
    return run


def _phwis_kernel(weights: np.ndarray, returns: np.ndarray,
                  lengths: np.ndarray):
    def run(sel=None):
        w = weights if sel is None else weights[sel]
        g = returns if sel is None else returns[sel]
        ln = lengths if sel is None else lengths[sel]
        value = 0.0
        n = ln.shape[0]
        for length in np.unique(ln):
            grp = ln == length
            total = w[grp].sum()
            if total == 0.0:
                raise DegenerateWeightsError(
                    f"length-{int(length)} partition has zero weight sum")
            value += grp.sum() / n * (w[grp] * g[grp]).sum() / total
        return value
    return run


def _wdr_kernel(cum: np.ndarray, corrections: np.ndarray,
                baseline: np.ndarray):
    def run(sel=None):
        r = cum if sel is None else cum[sel]
        c = corrections if sel is None else corrections[sel]
        b = baseline if sel is None else baseline[sel]
        denom = r.sum(axis=0)
        if (denom == 0.0).any():
            raise DegenerateWeightsError(
                "per-step cumulative ratios sum to 0")
        return float(((r / denom) * c).sum() + b.mean())
    return run


# -- estimator construction -----------------------------------------------------


def _policy_state_values(policy: np.ndarray, q: QTable) -> np.ndarray:
    return (np.asarray(policy) * q.values).sum(axis=1)


def _dr_parts(dataset: Dataset, target: np.ndarray,
              behavior: np.ndarray | None, rewards: list[np.ndarray],
              gamma: float, qhat: QTable):
    pad = dataset.padded()
    ratios = step_ratios(dataset, target, behavior)
    cum = _cumulative_ratios(ratios)
    v = _policy_state_values(target, qhat)
    n, tmax = pad["obs"].shape
    qsa = qhat.values[pad["obs"], pad["act"]]
    r = _padded_rewards(dataset, rewards)
    v_next = np.zeros((n, tmax))
    for i, traj in enumerate(dataset.trajectories):
        ln = len(traj)
        # continuation value of the reached observation; none past the end
        v_next[i, :ln - 1] = v[traj.observations[1:ln]]
    disc = gamma ** np.arange(tmax)
    corrections = pad["mask"] * disc * (r - qsa + gamma * v_next)
    baseline = np.array([v[traj.observations[0]]
                         for traj in dataset.trajectories])
    return cum, corrections, baseline


ESTIMATOR_NAMES = ("is", "wis", "pdis", "phwis", "fqe", "dr", "wdr",
                   "hope", "sparse_hope", "soft_hope", "rand_hope")


def prepare_estimator(name: str, dataset: Dataset, target: np.ndarray,
                      *, behavior: np.ndarray | None = None,
                      rewards: list[np.ndarray] | None = None,
                      gamma: float | None = None,
                      qhat: QTable | None = None):
    """Resample-aware closure for one estimator.

    ``rewards`` is the already-chosen reward channel; the HOPE family
    expects its (variant-specific) reconstructed channel here.  The
    returned callable maps an optional index array (episode resample)
    to a value estimate.
    """
    if name not in ESTIMATOR_NAMES:
        raise ValueError(f"unknown estimator {name!r}")
    if gamma is None:
        gamma = dataset.gamma
    if rewards is None:
        rewards = reward_channel(dataset, "sparse")

    if name == "fqe":
        if qhat is None:
            qhat = fit_q(dataset, rewards, gamma=gamma, policy=target)
        v = _policy_state_values(target, qhat)
        values = np.array([v[traj.observations[0]]
                           for traj in dataset.trajectories])
        return _mean_kernel(values)

    if name in ("dr", "wdr"):
        if qhat is None:
            qhat = fit_q(dataset, rewards, gamma=gamma, policy=target)
        cum, corrections, baseline = _dr_parts(dataset, target, behavior,
                                               rewards, gamma, qhat)
        if name == "dr":
            values = baseline + (cum * corrections).sum(axis=1)
            return _mean_kernel(values)
        return _wdr_kernel(cum, corrections, baseline)

    if name == "pdis":
        ratios = step_ratios(dataset, target, behavior)
        cum = _cumulative_ratios(ratios)
        pad = dataset.padded()
        r = _padded_rewards(dataset, rewards)
        disc = gamma ** np.arange(r.shape[1])
        values = (pad["mask"] * disc * cum * r).sum(axis=1)
        return _mean_kernel(values)

    weights = importance_weights(dataset, target, behavior)
    returns = discounted_returns(dataset, rewards, gamma)
    if name == "is":
        return _mean_kernel(weights * returns)
    if name == "phwis":
        return _phwis_kernel(weights, returns,
                             dataset.padded()["lengths"])
    # wis / hope / sparse_hope / soft_hope / rand_hope
    return _wis_kernel(weights, returns)


# -- public single-shot estimators ----------------------------------------------


def is_estimate(dataset, target, behavior=None, rewards=None, gamma=None):
    return prepare_estimator("is", dataset, target, behavior=behavior,
                             rewards=rewards, gamma=gamma)()


def wis_estimate(dataset, target, behavior=None, rewards=None, gamma=None):
    return prepare_estimator("wis", dataset, target, behavior=behavior,
                             rewards=rewards, gamma=gamma)()


def pdis_estimate(dataset, target, behavior=None, rewards=None, gamma=None):
    return prepare_estimator("pdis", dataset, target, behavior=behavior,
                             rewards=rewards, gamma=gamma)()


def phwis_estimate(dataset, target, behavior=None, rewards=None, gamma=None):
    return prepare_estimator("phwis", dataset, target, behavior=behavior,
                             rewards=rewards, gamma=gamma)()


def fqe_estimate(dataset, target, rewards=None, gamma=None, qhat=None):
    return prepare_estimator("fqe", dataset, target, rewards=rewards,
                             gamma=gamma, qhat=qhat)()


def dr_estimate(dataset, target, behavior=None, rewards=None, gamma=None,
                qhat=None):
    return prepare_estimator("dr", dataset, target, behavior=behavior,
                             rewards=rewards, gamma=gamma, qhat=qhat)()


def wdr_estimate(dataset, target, behavior=None, rewards=None, gamma=None,
                 qhat=None):
    return prepare_estimator("wdr", dataset, target, behavior=behavior,
                             rewards=rewards, gamma=gamma, qhat=qhat)()


def hope_estimate(dataset, target, behavior=None, rhat=None, gamma=None,
                  bounds: tuple[float, float] | None = None):
    """Weighted importance sampling over reconstructed rewards.

    With ``bounds`` the per-trajectory returns are affinely rescaled to
    [0, 1] first, so the estimate itself is bounded in [0, 1].
    """
    if rhat is None:
        raise ValueError("hope_estimate requires reconstructed rewards")
    if gamma is None:
        gamma = dataset.gamma
    weights = importance_weights(dataset, target, behavior)
    returns = discounted_returns(dataset, rhat, gamma)
    if bounds is not None:
        lb, ub = bounds
        returns = np.array([
            _normalize_return(g, lb, ub) for g in returns])
    return _wis_kernel(weights, returns)()


def _normalize_return(raw: float, g_lb: float, g_ub: float) -> float:
    if g_ub <= g_lb:
        raise ValueError("g_ub must exceed g_lb")
    if raw < g_lb - 1e-12 or raw > g_ub + 1e-12:
        raise ValueError(f"return {raw} outside bounds [{g_lb}, {g_ub}]")
    return float(np.clip((raw - g_lb) / (g_ub - g_lb), 0.0, 1.0))


def normalized_return(trajectory: Trajectory, rhat, gamma: float,
                      g_lb: float, g_ub: float) -> float:
    """Affine rescale of the trajectory's discounted reconstructed return."""
    rhat = np.asarray(rhat, dtype=np.float64)
    raw = float((gamma ** np.arange(len(rhat))) @ rhat)
    return _normalize_return(raw, g_lb, g_ub)


# -- HOPE ablation reward channels ------------------------------------------------


def sparse_hope_rewards(dataset: Dataset, critical,
                        index: NeighborIndex) -> list[np.ndarray]:
    """Sparse preliminary channel, then neighbor calibration on critical
    observations."""
    preliminary = reward_channel(dataset, "sparse")
    return reconstruct(dataset, preliminary, critical, index)


def soft_hope_rewards(dataset: Dataset, preliminary,
                      index: NeighborIndex) -> list[np.ndarray]:
    """Neighbor averaging at every step (no critical-set gate)."""
    everything = {o for traj in dataset.trajectories
                  for o in traj.observations[:len(traj)]}
    return reconstruct(dataset, preliminary, everything, index)


def _nearest_step_table(dataset: Dataset, feature_fn):
    """nearest_step[u, k]: earliest closest step on trajectory k to the
    u-th distinct observation."""
    feats = _feature_rows(dataset, feature_fn)
    obs_ids = sorted(feats)
    obs_pos = {o: j for j, o in enumerate(obs_ids)}
    dim = len(next(iter(feats.values())))
    n, tmax = len(dataset), dataset.max_len
    padded = np.full((n, tmax, dim), np.inf)
    for i, traj in enumerate(dataset.trajectories):
        for t in range(len(traj)):
            padded[i, t] = feats[traj.observations[t]]
    table = np.zeros((len(obs_ids), n), dtype=np.int64)
    for j, o in enumerate(obs_ids):
        d = np.linalg.norm(padded - feats[o], axis=2)
        table[j] = d.argmin(axis=1)
    return table, obs_pos


def rand_hope_rewards(dataset: Dataset, preliminary, critical, k: int,
                      repeats: int = 100, seed: int = 0,
                      feature_fn=None) -> list[np.ndarray]:
    """Reconstruction with uniformly random neighbor trajectories.

    The trajectory-selection stage is randomized (without replacement,
    self excluded); the nearest-observation stage is kept.  The channel
    is averaged over ``repeats`` draws, which by linearity of WIS in the
    returns equals averaging the repeated estimates.
    """
    n = len(dataset)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the dataset size {n}")
    rng = np.random.default_rng(seed)
    values = _event_values(dataset, preliminary)
    critical_ids = set(getattr(critical, "observations", critical))
    table, obs_pos = _nearest_step_table(dataset, feature_fn)
    padded_vals = _padded_rewards(dataset, values)

    # flattened critical events
    ev_traj, ev_obs_pos = [], []
    for i, traj in enumerate(dataset.trajectories):
        for t in range(len(traj)):
            if traj.observations[t] in critical_ids:
                ev_traj.append(i)
                ev_obs_pos.append(obs_pos[traj.observations[t]])
    out = [v.copy() for v in values]
    if not ev_traj:
        return out
    ev_traj = np.asarray(ev_traj)
    ev_obs_pos = np.asarray(ev_obs_pos)

    acc = np.zeros(ev_traj.shape[0])
    all_others = None
    if k == n - 1:  # every candidate selected; no randomness left
        grid = np.tile(np.arange(n - 1), (n, 1))
        all_others = grid + (grid >= np.arange(n)[:, None])
    for _ in range(repeats):
        if all_others is not None:
            nb = all_others
        else:
            nb = rng.integers(0, n - 1, size=(n, k))
            nb += nb >= np.arange(n)[:, None]  # skip self
            # resample rows that drew duplicate neighbors
            while True:
                dup = (np.diff(np.sort(nb, axis=1), axis=1) == 0).any(axis=1)
                if not dup.any():
                    break
                redraw = rng.integers(0, n - 1, size=(int(dup.sum()), k))
                redraw += redraw >= np.flatnonzero(dup)[:, None]
                nb[dup] = redraw
        ev_nb = nb[ev_traj]                              # (E, k)
        ev_steps = table[ev_obs_pos[:, None], ev_nb]      # (E, k)
        acc += padded_vals[ev_nb, ev_steps].mean(axis=1)
    acc /= repeats

    pos = 0
    for i, traj in enumerate(dataset.trajectories):
        for t in range(len(traj)):
            if traj.observations[t] in critical_ids:
                out[i][t] = acc[pos]
                pos += 1
    return out
