"""Deterministic-seeded synthetic sepsis POMDP simulator.

State space: diabetic flag x 4 discrete vitals x 3 treatment flags,
1440 states total.  Eight actions assign a binary value to each of
{antibiotics, vasopressors, ventilation}.  Episodes end on discharge
(all vitals normal, no treatment, +1), death (>= 3 vitals abnormal, -1)
or at the horizon (0).

The dynamics are a parameterized discrete model (see
:class:`TransitionParams`): untreated vitals fluctuate one level with a
small probability, treatments drive their target vitals toward normal
(or raise them, for vasopressors), and withdrawing a treatment can
revert its effect.  Everything is exposed both as a sampler and as
exact transition distributions so dynamic programming gives oracle
policy values.

Partial observability: the default observation mask hides the diabetic
flag.  Masked components are collapsed to level 0 before encoding, so
observation ids live in the same [0, 1440) index space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import policies
from .trajectory import Dataset, Trajectory, discounted_return

N_STATES = 1440
N_ACTIONS = 8

# vital levels (index = ordinal level)
HR_LEVELS = ("low", "normal", "high")
BP_LEVELS = ("low", "normal", "high")
O2_LEVELS = ("low", "normal")
GLU_LEVELS = ("very_low", "low", "normal", "high", "very_high")
HR_NORMAL, BP_NORMAL, O2_NORMAL, GLU_NORMAL = 1, 1, 1, 2

COMPONENTS = ("diabetic", "heart_rate", "blood_pressure", "oxygen",
              "glucose", "treatments")

# action/treatment bit layout: antibiotics=4, vasopressors=2, ventilation=1
ANTIBIOTICS_BIT, VASOPRESSOR_BIT, VENTILATION_BIT = 4, 2, 1
ACTION_NONE = 0
ACTION_ANTIBIOTICS_ONLY = ANTIBIOTICS_BIT


@dataclass(frozen=True)
class PatientState:
    diabetic: int
    heart_rate: int
    blood_pressure: int
    oxygen: int
    glucose: int
    treatments: tuple[int, int, int]  # (antibiotics, vasopressors, ventilation)

    def __post_init__(self):
        ok = (self.diabetic in (0, 1) and 0 <= self.heart_rate < 3
              and 0 <= self.blood_pressure < 3 and self.oxygen in (0, 1)
              and 0 <= self.glucose < 5 and len(self.treatments) == 3
              and all(t in (0, 1) for t in self.treatments))
        if not ok:
            raise ValueError(f"invalid patient state: {self}")

    @property
    def treatment_bits(self) -> int:
        ab, vaso, vent = self.treatments
        return ab * ANTIBIOTICS_BIT + vaso * VASOPRESSOR_BIT + vent * VENTILATION_BIT

    def abnormal_count(self) -> int:
        return (int(self.heart_rate != HR_NORMAL)
                + int(self.blood_pressure != BP_NORMAL)
                + int(self.oxygen != O2_NORMAL)
                + int(self.glucose != GLU_NORMAL))


def encode_state(state: PatientState) -> int:
    idx = state.diabetic
    idx = idx * 3 + state.heart_rate
    idx = idx * 3 + state.blood_pressure
    idx = idx * 2 + state.oxygen
    idx = idx * 5 + state.glucose
    return idx * 8 + state.treatment_bits


def decode_state(idx: int) -> PatientState:
    if not 0 <= idx < N_STATES:
        raise ValueError(f"state id {idx} out of range")
    idx, t = divmod(idx, 8)
    idx, glu = divmod(idx, 5)
    idx, ox = divmod(idx, 2)
    idx, bp = divmod(idx, 3)
    diab, hr = divmod(idx, 3)
    return PatientState(diab, hr, bp, ox, glu,
                        ((t >> 2) & 1, (t >> 1) & 1, t & 1))


def masked_state(state: PatientState, mask) -> PatientState:
    """Collapse hidden components to level 0 / treatments off."""
    mask = frozenset(mask)
    unknown = mask - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown mask components: {sorted(unknown)}")
    return PatientState(
        diabetic=0 if "diabetic" in mask else state.diabetic,
        heart_rate=0 if "heart_rate" in mask else state.heart_rate,
        blood_pressure=0 if "blood_pressure" in mask else state.blood_pressure,
        oxygen=0 if "oxygen" in mask else state.oxygen,
        glucose=0 if "glucose" in mask else state.glucose,
        treatments=(0, 0, 0) if "treatments" in mask else state.treatments,
    )


def observation_features(obs_id: int) -> np.ndarray:
    """Decoded ordinal feature vector used by observation distances."""
    s = decode_state(obs_id)
    return np.array([s.diabetic, s.heart_rate, s.blood_pressure, s.oxygen,
                     s.glucose, *s.treatments], dtype=np.float64)


def terminal_check(state: PatientState) -> str:
    """'discharge', 'death' or 'none' (death wins; conditions are disjoint)."""
    abnormal = state.abnormal_count()
    if abnormal >= 3:
        return "death"
    if abnormal == 0 and state.treatment_bits == 0:
        return "discharge"
    return "none"


@dataclass(frozen=True)
class TransitionParams:
    """Per-vital fluctuation and treatment-effect probabilities."""

    fluctuation: float = 0.1          # untreated vital moves +/-1 level
    antibiotics_heal: float = 0.5     # HR and BP each move toward normal
    ventilation_heal: float = 0.7     # oxygen moves toward normal
    vasopressor_raise: float = 0.7    # BP +1, non-diabetic
    vasopressor_raise_diabetic: float = 0.5   # BP +1, diabetic
    vasopressor_glucose_diabetic: float = 0.9  # glucose +1, diabetic
    withdrawal: float = 0.1           # reverting effect on treatment stop

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class SimConfig:
    horizon: int = 5
    gamma: float = 0.99
    transition_params: TransitionParams = field(default_factory=TransitionParams)
    observation_mask: tuple[str, ...] = ("diabetic",)
    seed: int = 0
    behavior_epsilon: float = 0.15

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        unknown = set(self.observation_mask) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown mask components: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "gamma": self.gamma,
            "transition_params": asdict(self.transition_params),
            "observation_mask": list(self.observation_mask),
            "seed": self.seed,
            "behavior_epsilon": self.behavior_epsilon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        params = data.pop("transition_params", {})
        mask = tuple(data.pop("observation_mask", ("diabetic",)))
        return cls(transition_params=TransitionParams(**params),
                   observation_mask=mask, **data)


# -- per-component next-level distributions ----------------------------------


def _stay(level):
    return [(level, 1.0)]


def _move(level, target, p):
    if p <= 0.0 or target == level:
        return _stay(level)
    if p >= 1.0:
        return [(target, 1.0)]
    return [(target, p), (level, 1.0 - p)]


def _toward(level, normal, p):
    if level == normal:
        return _stay(level)
    return _move(level, level + (1 if level < normal else -1), p)


def _fluctuate(level, top, p):
    out = {level: 1.0}
    for nxt in (level - 1, level + 1):
        if 0 <= nxt <= top and p > 0.0:
            out[nxt] = out.get(nxt, 0.0) + p / 2.0
            out[level] -= p / 2.0
    return sorted(out.items())


class SepsisModel:
    """Cached transition model plus sampling and DP oracles for one config."""

    def __init__(self, config: SimConfig):
        self.config = config
        self._dist_cache: dict[tuple[int, int], tuple] = {}
        self.outcome = np.zeros(N_STATES, dtype=np.int64)  # +1/-1/0 per state
        mask = frozenset(config.observation_mask)
        self.mask_map = np.zeros(N_STATES, dtype=np.int64)
        for s in range(N_STATES):
            st = decode_state(s)
            out = terminal_check(st)
            self.outcome[s] = 1 if out == "discharge" else (-1 if out == "death" else 0)
            self.mask_map[s] = encode_state(masked_state(st, mask))
        self.nonterminal = self.outcome == 0
        # initial states: no treatment, 1-2 abnormal vitals (never terminal)
        self.initial_states = np.array([
            s for s in range(N_STATES)
            if (st := decode_state(s)).treatment_bits == 0
            and 1 <= st.abnormal_count() <= 2
        ], dtype=np.int64)
        self._flat = None

    # -- exact transition distributions ----------------------------------

    def _component_dists(self, state: PatientState, action: int):
        p = self.config.transition_params
        old_t, new_t = state.treatment_bits, action
        ab_on = bool(new_t & ANTIBIOTICS_BIT)
        ab_off = bool(old_t & ANTIBIOTICS_BIT) and not ab_on
        vaso_on = bool(new_t & VASOPRESSOR_BIT)
        vaso_off = bool(old_t & VASOPRESSOR_BIT) and not vaso_on
        vent_on = bool(new_t & VENTILATION_BIT)
        vent_off = bool(old_t & VENTILATION_BIT) and not vent_on

        if ab_on:
            hr = _toward(state.heart_rate, HR_NORMAL, p.antibiotics_heal)
        elif ab_off:
            hr = _move(state.heart_rate, min(state.heart_rate + 1, 2), p.withdrawal)
        else:
            hr = _fluctuate(state.heart_rate, 2, p.fluctuation)

        if vaso_on:
            raise_p = (p.vasopressor_raise_diabetic if state.diabetic
                       else p.vasopressor_raise)
            bp = _move(state.blood_pressure, min(state.blood_pressure + 1, 2),
                       raise_p)
        elif ab_on:
            bp = _toward(state.blood_pressure, BP_NORMAL, p.antibiotics_heal)
        elif vaso_off or ab_off:
            bp = _move(state.blood_pressure, max(state.blood_pressure - 1, 0),
                       p.withdrawal)
        else:
            bp = _fluctuate(state.blood_pressure, 2, p.fluctuation)

        if vent_on:
            ox = _toward(state.oxygen, O2_NORMAL, p.ventilation_heal)
        elif vent_off:
            ox = _move(state.oxygen, 0, p.withdrawal)
        else:
            ox = _fluctuate(state.oxygen, 1, p.fluctuation)

        if vaso_on and state.diabetic:
            glu = _move(state.glucose, min(state.glucose + 1, 4),
                        p.vasopressor_glucose_diabetic)
        else:
            glu = _fluctuate(state.glucose, 4, p.fluctuation)

        return hr, bp, ox, glu

    def transition(self, state_id: int, action: int):
        """(next_ids, probs, rewards) for one state-action pair."""
        key = (state_id, action)
        cached = self._dist_cache.get(key)
        if cached is not None:
            return cached
        state = decode_state(state_id)
        if self.outcome[state_id] != 0:
            raise ValueError(f"cannot step terminal state {state_id}")
        hr, bp, ox, glu = self._component_dists(state, action)
        treatments = ((action >> 2) & 1, (action >> 1) & 1, action & 1)
        ids, probs = [], []
        for hr_v, hr_p in hr:
            for bp_v, bp_p in bp:
                for ox_v, ox_p in ox:
                    for glu_v, glu_p in glu:
                        nxt = PatientState(state.diabetic, hr_v, bp_v, ox_v,
                                           glu_v, treatments)
                        ids.append(encode_state(nxt))
                        probs.append(hr_p * bp_p * ox_p * glu_p)
        ids = np.asarray(ids, dtype=np.int64)
        probs = np.asarray(probs, dtype=np.float64)
        rewards = self.outcome[ids].astype(np.float64)
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        out = (ids, probs, rewards, cum)
        self._dist_cache[key] = out
        return out

    # -- sampling ---------------------------------------------------------

    def step(self, state: PatientState, action: int,
             rng: np.random.Generator) -> tuple[PatientState, float, bool]:
        if terminal_check(state) != "none":
            raise ValueError("cannot step a terminal state")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action {action} out of range")
        ids, _, rewards, cum = self.transition(encode_state(state), action)
        j = int(np.searchsorted(cum, rng.random(), side="right"))
        return decode_state(int(ids[j])), float(rewards[j]), rewards[j] != 0.0

    def observe(self, state_id: int) -> int:
        return int(self.mask_map[state_id])

    def simulate_trajectory(self, policy: np.ndarray,
                            rng: np.random.Generator) -> Trajectory:
        """One episode under ``policy`` (defined over masked observations).

        The observable channel carries masked observation ids and no
        per-step rewards; true rewards go to the ground-truth sidecar
        and the aggregated reward is their discounted sum.
        """
        cfg = self.config
        state_id = int(self.initial_states[
            rng.integers(len(self.initial_states))])
        obs_seq, act_seq, gt_rewards, beta = [], [], [], []
        for _ in range(cfg.horizon):
            obs = self.observe(state_id)
            action = policies.sample_action(policy, obs, rng)
            ids, _, rewards, cum = self.transition(state_id, action)
            j = int(np.searchsorted(cum, rng.random(), side="right"))
            obs_seq.append(obs)
            act_seq.append(action)
            beta.append(float(policy[obs, action]))
            gt_rewards.append(float(rewards[j]))
            state_id = int(ids[j])
            if self.outcome[state_id] != 0:
                break
        obs_seq.append(self.observe(state_id))
        return Trajectory(
            observations=obs_seq,
            actions=act_seq,
            rewards=None,
            aggregated_reward=discounted_return(gt_rewards, cfg.gamma),
            ground_truth_rewards=gt_rewards,
            behavior_probs=beta,
        )

    def simulate_dataset(self, policy: np.ndarray, n: int) -> Dataset:
        """n trajectories; trajectory i uses stream seed ^ i (split rule)."""
        seed = self.config.seed
        trajectories = [
            self.simulate_trajectory(policy, np.random.default_rng(seed ^ i))
            for i in range(n)
        ]
        return Dataset(trajectories, N_STATES, N_ACTIONS, self.config.gamma)

    # -- dynamic-programming oracles --------------------------------------

    def _flat_model(self):
        """Flat (pair, next, prob, reward) arrays over nonterminal states."""
        if self._flat is None:
            pair, nxt, prob, rew = [], [], [], []
            for s in np.flatnonzero(self.nonterminal):
                for a in range(N_ACTIONS):
                    ids, probs, rewards, _ = self.transition(int(s), a)
                    pair.extend([s * N_ACTIONS + a] * len(ids))
                    nxt.extend(ids)
                    prob.extend(probs)
                    rew.extend(rewards)
            self._flat = (np.asarray(pair), np.asarray(nxt),
                          np.asarray(prob), np.asarray(rew))
        return self._flat

    def _backward_q(self, policy: np.ndarray | None):
        """Finite-horizon backward recursion.

        Returns Q_1 (values of the first step).  With ``policy`` the
        continuation follows it; with ``None`` the recursion is optimal
        (max over actions).
        """
        pair, nxt, prob, rew = self._flat_model()
        gamma = self.config.gamma
        v_next = np.zeros(N_STATES)
        q = np.zeros((N_STATES, N_ACTIONS))
        for _ in range(self.config.horizon):
            contrib = prob * (rew + gamma * v_next[nxt])
            q = np.bincount(pair, weights=contrib,
                            minlength=N_STATES * N_ACTIONS)
            q = q.reshape(N_STATES, N_ACTIONS)
            if policy is None:
                v = q.max(axis=1)
            else:
                v = (policy[self.mask_map] * q).sum(axis=1)
            v_next = np.where(self.nonterminal, v, 0.0)
        return q

    def state_values(self, policy: np.ndarray) -> np.ndarray:
        q = self._backward_q(policy)
        v = (policy[self.mask_map] * q).sum(axis=1)
        return np.where(self.nonterminal, v, 0.0)

    def true_policy_value(self, policy: np.ndarray) -> float:
        """Exact expected discounted return from the initial distribution."""
        return float(self.state_values(policy)[self.initial_states].mean())

    def solve_optimal_policy(self) -> np.ndarray:
        """Greedy stationary policy over masked observations.

        The full-horizon optimal Q at the first step is marginalized
        uniformly over the states behind each masked observation.
        """
        q = self._backward_q(None)
        scores = np.zeros((N_STATES, N_ACTIONS))
        counts = np.zeros(N_STATES)
        live = np.flatnonzero(self.nonterminal)
        np.add.at(scores, self.mask_map[live], q[live])
        np.add.at(counts, self.mask_map[live], 1.0)
        actions = np.zeros(N_STATES, dtype=np.int64)
        seen = counts > 0
        actions[seen] = scores[seen].argmax(axis=1)
        policy = policies.uniform_policy(N_STATES, N_ACTIONS)
        policy[seen] = 0.0
        policy[seen, actions[seen]] = 1.0
        return policy

    def evaluation_policies(self) -> dict[str, np.ndarray]:
        const = np.ones(N_STATES, dtype=np.int64)
        return {
            "optimal": self.solve_optimal_policy(),
            "always_antibiotics": policies.deterministic_policy(
                const * ACTION_ANTIBIOTICS_ONLY, N_ACTIONS),
            "never_antibiotics": policies.deterministic_policy(
                const * ACTION_NONE, N_ACTIONS),
        }

    def behavior_policy(self) -> np.ndarray:
        """Epsilon-soft perturbation of the optimal policy (full support)."""
        return policies.epsilon_soft(self.solve_optimal_policy(),
                                     self.config.behavior_epsilon)

    def monte_carlo_value(self, policy: np.ndarray, n: int,
                          seed: int = 0) -> tuple[float, float]:
        """Batched rollout estimate of the policy value; (mean, stderr)."""
        rng = np.random.default_rng(seed)
        states = self.initial_states[rng.integers(len(self.initial_states),
                                                  size=n)].copy()
        returns = np.zeros(n)
        active = np.arange(n)
        gamma = self.config.gamma
        for t in range(self.config.horizon):
            if active.size == 0:
                break
            cur = states[active]
            obs = self.mask_map[cur]
            draws = rng.random(active.size)
            actions = np.zeros(active.size, dtype=np.int64)
            for u in np.unique(obs):
                grp = obs == u
                actions[grp] = np.searchsorted(np.cumsum(policy[u]),
                                               draws[grp], side="right")
            draws = rng.random(active.size)
            rewards = np.zeros(active.size)
            nxt = np.zeros(active.size, dtype=np.int64)
            keys = cur * N_ACTIONS + actions
            for key in np.unique(keys):
                grp = keys == key
                ids, _, rews, cum = self.transition(int(key) // N_ACTIONS,
                                                    int(key) % N_ACTIONS)
                j = np.searchsorted(cum, draws[grp], side="right")
                nxt[grp] = ids[j]
                rewards[grp] = rews[j]
            returns[active] += gamma ** t * rewards
            states[active] = nxt
            active = active[self.outcome[nxt] == 0]
        return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n))


# -- module-level conveniences -------------------------------------------------


def solve_optimal_policy(config: SimConfig) -> np.ndarray:
    return SepsisModel(config).solve_optimal_policy()


def true_policy_value(policy: np.ndarray, config: SimConfig) -> float:
    return SepsisModel(config).true_policy_value(policy)


def simulate_trajectory(policy: np.ndarray, config: SimConfig,
                        rng: np.random.Generator) -> Trajectory:
    return SepsisModel(config).simulate_trajectory(policy, rng)
