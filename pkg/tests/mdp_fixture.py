"""Small fully observed MDP fixture with exact dynamic-programming values.

Five states, two actions, short horizon.  The simulator stores behavior
probabilities on each trajectory and keeps the true per-step rewards in
the ground-truth sidecar channel, matching the data layout the
estimators expect.  Trajectory i draws from the stream seed ^ i.
"""

from dataclasses import dataclass, field

import numpy as np

from hope_ope.trajectory import Dataset, Trajectory, discounted_return

N_STATES = 5
N_ACTIONS = 2


@dataclass
class SmallMDP:
    p: np.ndarray                  # (S, A, S) transition probabilities
    r: np.ndarray                  # (S, A) deterministic rewards
    p0: np.ndarray                 # initial state distribution
    horizon: int = 4
    gamma: float = 0.9
    _cum: dict = field(default_factory=dict)

    def q_values(self, policy: np.ndarray) -> np.ndarray:
        """Finite-horizon Q at the first step under the given policy."""
        v = np.zeros(N_STATES)
        q = np.zeros((N_STATES, N_ACTIONS))
        for _ in range(self.horizon):
            q = self.r + self.gamma * self.p @ v
            v = (policy * q).sum(axis=1)
        return q

    def true_value(self, policy: np.ndarray) -> float:
        q = self.q_values(policy)
        v = (policy * q).sum(axis=1)
        return float(self.p0 @ v)

    def _cumulative(self, key, probs):
        cum = self._cum.get(key)
        if cum is None:
            cum = np.cumsum(probs)
            cum[-1] = 1.0
            self._cum[key] = cum
        return cum

    def simulate_one(self, policy: np.ndarray,
                     rng: np.random.Generator) -> Trajectory:
        s = int(np.searchsorted(self._cumulative("p0", self.p0),
                                rng.random(), side="right"))
        obs, acts, rewards, beta = [s], [], [], []
        for _ in range(self.horizon):
            # policy rows are not cached: the same instance simulates
            # under several different policies
            cum_pi = np.cumsum(policy[s])
            cum_pi[-1] = 1.0
            a = int(np.searchsorted(cum_pi, rng.random(), side="right"))
            ns = int(np.searchsorted(self._cumulative((s, a), self.p[s, a]),
                                     rng.random(), side="right"))
            acts.append(a)
            beta.append(float(policy[s, a]))
            rewards.append(float(self.r[s, a]))
            obs.append(ns)
            s = ns
        return Trajectory(
            observations=obs,
            actions=acts,
            rewards=None,
            aggregated_reward=discounted_return(rewards, self.gamma),
            ground_truth_rewards=rewards,
            behavior_probs=beta,
        )

    def simulate(self, policy: np.ndarray, n: int, seed: int = 0) -> Dataset:
        trajectories = [
            self.simulate_one(policy, np.random.default_rng(seed ^ i))
            for i in range(n)
        ]
        return Dataset(trajectories, N_STATES, N_ACTIONS, self.gamma)


def make_mdp(seed: int = 0, horizon: int = 4, gamma: float = 0.9) -> SmallMDP:
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(N_STATES), size=(N_STATES, N_ACTIONS))
    r = rng.uniform(-1.0, 1.0, size=(N_STATES, N_ACTIONS))
    p0 = rng.dirichlet(np.ones(N_STATES))
    return SmallMDP(p, r, p0, horizon=horizon, gamma=gamma)


def behavior_policy(seed: int = 0, floor: float = 0.2) -> np.ndarray:
    """A full-support stochastic behavior policy."""
    rng = np.random.default_rng(seed)
    policy = rng.dirichlet(np.ones(N_ACTIONS), size=N_STATES)
    policy = floor / N_ACTIONS + (1.0 - floor) * policy
    return policy / policy.sum(axis=1, keepdims=True)


def target_policy(seed: int = 1, floor: float = 0.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    policy = rng.dirichlet(np.ones(N_ACTIONS), size=N_STATES)
    if floor > 0:
        policy = floor / N_ACTIONS + (1.0 - floor) * policy
        policy = policy / policy.sum(axis=1, keepdims=True)
    return policy
