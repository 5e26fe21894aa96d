"""Simulator tests: encoding, dynamics, terminal logic, DP oracles."""

import numpy as np
import pytest

from hope_ope.env_sepsis import (N_ACTIONS, N_STATES, PatientState, SepsisModel,
                                 SimConfig, TransitionParams, decode_state,
                                 encode_state, masked_state,
                                 observation_features, terminal_check)


@pytest.fixture(scope="module")
def model():
    return SepsisModel(SimConfig())


def test_encoding_bijection():
    seen = set()
    for idx in range(N_STATES):
        state = decode_state(idx)
        assert encode_state(state) == idx
        seen.add(state)
    assert len(seen) == N_STATES


def test_encode_out_of_range():
    with pytest.raises(ValueError):
        decode_state(N_STATES)
    with pytest.raises(ValueError):
        PatientState(2, 0, 0, 0, 0, (0, 0, 0))


def test_masking_hides_diabetic_flag():
    masked = {encode_state(masked_state(decode_state(s), ("diabetic",)))
              for s in range(N_STATES)}
    assert len(masked) == N_STATES // 2
    s = PatientState(1, 2, 0, 1, 3, (1, 0, 1))
    m = masked_state(s, ("diabetic",))
    assert m.diabetic == 0 and m.heart_rate == 2 and m.treatments == (1, 0, 1)


def test_terminal_check():
    normal = PatientState(0, 1, 1, 1, 2, (0, 0, 0))
    assert terminal_check(normal) == "discharge"
    # normal vitals but a treatment still on: not discharged
    treated = PatientState(0, 1, 1, 1, 2, (1, 0, 0))
    assert terminal_check(treated) == "none"
    dead = PatientState(0, 0, 0, 0, 2, (0, 0, 0))
    assert terminal_check(dead) == "death"
    sick = PatientState(0, 0, 1, 1, 2, (0, 0, 0))
    assert terminal_check(sick) == "none"


def test_outcome_rewards(model):
    assert set(np.unique(model.outcome)) <= {-1, 0, 1}
    discharge = encode_state(PatientState(1, 1, 1, 1, 2, (0, 0, 0)))
    death = encode_state(PatientState(0, 0, 2, 0, 2, (0, 0, 0)))
    assert model.outcome[discharge] == 1
    assert model.outcome[death] == -1


def test_transition_distributions_are_valid(model):
    rng = np.random.default_rng(0)
    live = np.flatnonzero(model.nonterminal)
    for s in rng.choice(live, size=50, replace=False):
        for a in range(N_ACTIONS):
            ids, probs, rewards, cum = model.transition(int(s), a)
            assert probs.sum() == pytest.approx(1.0, abs=1e-12)
            assert (probs > 0).all()
            assert len(ids) <= 54  # 3 * 3 * 2 * 3 component supports
            # next treatments mirror the action bits
            for nid in ids:
                assert decode_state(int(nid)).treatment_bits == a


def test_initial_states_are_live(model):
    for s in model.initial_states:
        st = decode_state(int(s))
        assert st.treatment_bits == 0
        assert 1 <= st.abnormal_count() <= 2
        assert model.outcome[s] == 0


def test_split_rule_determinism(model):
    beta = model.behavior_policy()
    d1 = model.simulate_dataset(beta, 20)
    d2 = model.simulate_dataset(beta, 20)
    for a, b in zip(d1.trajectories, d2.trajectories):
        assert a.observations == b.observations and a.actions == b.actions


def test_dp_matches_monte_carlo(model):
    policies = model.evaluation_policies()
    for name, policy in policies.items():
        dp = model.true_policy_value(policy)
        mc, se = model.monte_carlo_value(policy, 200_000, seed=4)
        assert abs(dp - mc) < 4 * se + 1e-4, name


def test_optimal_policy_dominates(model):
    policies = model.evaluation_policies()
    v_opt = model.true_policy_value(policies["optimal"])
    for name in ("always_antibiotics", "never_antibiotics"):
        assert v_opt > model.true_policy_value(policies[name])


def test_behavior_policy_full_support(model):
    beta = model.behavior_policy()
    assert (beta > 0).all()
    assert np.allclose(beta.sum(axis=1), 1.0, atol=1e-12)


def test_trajectory_layout(model):
    data = model.simulate_dataset(model.behavior_policy(), 50)
    for traj in data.trajectories:
        assert 1 <= len(traj) <= model.config.horizon
        assert len(traj.observations) == len(traj) + 1
        assert traj.rewards is None
        assert len(traj.ground_truth_rewards) == len(traj)
        # observations are masked ids (diabetic flag cleared)
        for o in traj.observations:
            assert decode_state(o).diabetic == 0


def test_observation_features():
    s = PatientState(0, 2, 1, 0, 4, (1, 1, 0))
    feats = observation_features(encode_state(s))
    assert feats.tolist() == [0, 2, 1, 0, 4, 1, 1, 0]


def test_transition_params_validated():
    with pytest.raises(ValueError):
        TransitionParams(fluctuation=1.5)
    with pytest.raises(ValueError):
        SimConfig(gamma=0.0)


def test_sim_config_roundtrip():
    cfg = SimConfig(horizon=3, gamma=0.9, seed=7,
                    transition_params=TransitionParams(fluctuation=0.2))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
