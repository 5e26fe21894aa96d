"""Tabular policy helpers.

A policy is an (n_obs, n_act) array of action probabilities; rows sum
to 1.  Deterministic policies are one-hot rows.
"""

from __future__ import annotations

import numpy as np


def validate_policy(policy: np.ndarray) -> None:
    policy = np.asarray(policy)
    if policy.ndim != 2:
        raise ValueError("policy must be a 2-D (n_obs, n_act) array")
    if (policy < 0).any():
        raise ValueError("policy probabilities must be nonnegative")
    if not np.allclose(policy.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("policy rows must sum to 1")


def deterministic_policy(actions: np.ndarray, n_act: int) -> np.ndarray:
    """One-hot policy from a per-observation action vector."""
    actions = np.asarray(actions, dtype=np.int64)
    policy = np.zeros((actions.shape[0], n_act))
    policy[np.arange(actions.shape[0]), actions] = 1.0
    return policy


def uniform_policy(n_obs: int, n_act: int) -> np.ndarray:
    return np.full((n_obs, n_act), 1.0 / n_act)


def epsilon_soft(policy: np.ndarray, epsilon: float) -> np.ndarray:
    """Mix a policy with uniform exploration: (1-eps)*pi + eps/|A|."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    n_act = policy.shape[1]
    return (1.0 - epsilon) * np.asarray(policy, dtype=np.float64) + epsilon / n_act


def sample_action(policy: np.ndarray, obs: int, rng: np.random.Generator) -> int:
    row = policy[obs]
    return int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
