import math

import numpy as np
import pytest

from rbmle.agents import (
    BASELINE_KINDS,
    BaselineAgent,
    BiasSchedule,
    ClockError,
    EpisodeLog,
    EpisodeSchedule,
    RBMLEAgent,
    admissible_threshold,
    alpha_at,
    baseline_select,
    make_agent,
)
from rbmle.estimation import TransitionCounts, record_transition
from rbmle.mdp import enumerate_policies, optimal_policy, validate_mdp
from rbmle.models import deceptive_model, reference_model

M0 = reference_model()


def test_alpha_examples():
    assert alpha_at(BiasSchedule(2, 3, 2, 2), 10) == pytest.approx(2 * math.log(8000))
    assert alpha_at(BiasSchedule(2, 3, 2, 2), 10) == pytest.approx(17.9744, abs=1e-4)
    assert alpha_at(BiasSchedule(1, 3, 1, 1), 1) == 0.0
    s = BiasSchedule(1.5, 3, 2, 2)
    values = [s(t) for t in range(1, 200)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_bias_schedule_validation():
    with pytest.raises(ValueError):
        BiasSchedule(0, 3, 2, 2)
    with pytest.raises(ValueError):
        BiasSchedule(1, 2, 2, 2)
    with pytest.raises(ValueError):
        alpha_at(BiasSchedule(1, 3, 2, 2), 0.5)


def test_admissibility_threshold():
    assert admissible_threshold(2, 2, 0.1, 0.5) == pytest.approx(8 * 2 / (2 * 0.1 * 0.5))
    s = BiasSchedule(161, 3, 2, 2)
    assert s.admissible(0.1, 0.5)
    assert not BiasSchedule(160, 3, 2, 2).admissible(0.1, 0.5)


def test_episode_schedule():
    assert [EpisodeSchedule.start(k) for k in range(1, 5)] == [1, 3, 7, 15]
    for k in range(1, 12):
        assert EpisodeSchedule.start(k + 1) == EpisodeSchedule.start(k) + EpisodeSchedule.length(k)
        assert EpisodeSchedule.episode_of(EpisodeSchedule.start(k)) == k
        assert EpisodeSchedule.episode_of(EpisodeSchedule.start(k + 1) - 1) == k
    starts = [t for t in range(1, 300) if EpisodeSchedule.is_start(t)]
    assert starts == [1, 3, 7, 15, 31, 63, 127, 255]
    for horizon in range(2, 5000, 7):
        assert EpisodeSchedule.episode_count_to(horizon) <= math.ceil(math.log2(horizon))
    with pytest.raises(ValueError):
        EpisodeSchedule.start(0)
    with pytest.raises(ValueError):
        EpisodeSchedule.episode_of(0)


def drive(agent, model, steps, seed=0):
    """Feed ``agent`` a trajectory of ``model``; returns the action sequence."""
    rng = np.random.default_rng(seed)
    agent.reset(np.random.default_rng(seed + 1))
    x, prev, actions = 0, None, []
    for t in range(1, steps + 1):
        u = agent.step(t, x, prev)
        actions.append(u)
        y = int(rng.choice(model.num_states, p=model.transitions[x, u]))
        prev, x = (x, u, y), y
    return actions


def test_policy_fixed_within_episodes():
    agent = make_agent({"kind": "rbmle", "a": 60.0}, M0)
    drive(agent, M0, 62)
    assert [e.start for e in agent.episodes] == [1, 3, 7, 15, 31]
    assert len(agent.episodes) == 5  # one index table per episode start
    for e in agent.episodes:
        assert set(e.indices) == set(enumerate_policies(2, 2))
        assert e.counts.clock == e.start
        assert e.counts.visit_counts.sum() == e.start - 1


def test_agent_actions_follow_current_policy():
    agent = make_agent({"kind": "rbmle", "a": 60.0}, M0)
    rng = np.random.default_rng(3)
    agent.reset()
    x, prev = 0, None
    for t in range(1, 40):
        u = agent.step(t, x, prev)
        assert u == agent.policy[x]
        y = int(rng.choice(2, p=M0.transitions[x, u]))
        prev, x = (x, u, y), y


def test_clock_mismatch_is_an_error():
    agent = make_agent({"kind": "ce-greedy"}, M0)
    agent.step(1, 0)
    with pytest.raises(ClockError):
        agent.step(3, 0, (0, 0, 0))
    agent.reset()
    agent.step(1, 0)
    with pytest.raises(ClockError):
        agent.step(2, 1, (0, 0, 0))  # transition does not end in the current state


def test_rbmle_is_deterministic():
    runs = []
    for _ in range(2):
        agent = make_agent({"kind": "rbmle", "a": 60.0}, M0)
        runs.append((drive(agent, M0, 64, seed=4), [e.policy for e in agent.episodes]))
    assert runs[0] == runs[1]


def test_make_agent_configs():
    agent = make_agent({"kind": "rbmle", "a": 5.0, "b": 4.0, "optimizer": {"restarts": 3}}, M0)
    assert isinstance(agent, RBMLEAgent)
    assert agent.config()["b"] == 4.0
    assert agent.config()["optimizer"]["restarts"] == 3
    with pytest.raises(ValueError):
        make_agent({"kind": "rbmle"}, M0)
    with pytest.raises(ValueError):
        make_agent({"kind": "bogus"}, M0)
    for kind in BASELINE_KINDS:
        a = make_agent({"kind": kind}, M0)
        assert isinstance(a, BaselineAgent) and a.kind == kind


def test_oracle_picks_an_optimal_policy():
    for model in (M0, deceptive_model()):
        best = optimal_policy(model)[1]
        assert baseline_select("oracle", model=model) in best
    with pytest.raises(ValueError):
        baseline_select("oracle")


def test_ce_greedy_uses_uniform_rows_when_unvisited():
    # no data: every row is uniform, so the greedy policy maximizes the reward in each state
    counts = TransitionCounts.empty(2, 2)
    rewards = np.array([[0.2, 0.8], [0.6, 0.1]])
    m = validate_mdp(np.full((2, 2, 2), 0.5), rewards)
    assert baseline_select("ce-greedy", counts, m) == (1, 0)


def test_ce_greedy_matches_empirical_optimum():
    rng = np.random.default_rng(0)
    counts = TransitionCounts.empty(2, 2)
    for _ in range(2000):
        x, u = rng.integers(0, 2, size=2)
        y = int(rng.choice(2, p=M0.transitions[x, u]))
        record_transition(counts, int(x), int(u), y)
    assert baseline_select("ce-greedy", counts, M0) in optimal_policy(M0)[1]


def test_epsilon_zero_equals_ce_greedy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        counts = TransitionCounts.from_transition_counts(rng.integers(0, 20, size=(2, 2, 2)))
        ce = baseline_select("ce-greedy", counts, M0)
        eps = baseline_select("epsilon-greedy", counts, M0, epsilon=0.0, rng=np.random.default_rng(2))
        assert eps == ce


def test_epsilon_one_is_uniform():
    counts = TransitionCounts.empty(2, 2)
    rng = np.random.default_rng(5)
    draws = 10_000
    picks = np.array([baseline_select("epsilon-greedy", counts, M0, epsilon=1.0, rng=rng) for _ in range(draws)])
    sigma = math.sqrt(draws * 0.5 * 0.5)
    for x in range(2):
        assert abs(np.sum(picks[:, x] == 1) - draws / 2) <= 3 * sigma


def test_uniform_random_agent_actions():
    agent = make_agent({"kind": "uniform-random"}, M0)
    actions = np.array(drive(agent, M0, 4000, seed=2))
    assert abs(actions.mean() - 0.5) <= 3 * math.sqrt(0.25 / len(actions))


def test_unknown_baseline_kind():
    with pytest.raises(ValueError):
        baseline_select("ucb", TransitionCounts.empty(2, 2), M0)


def test_episode_log_round_trip():
    agent = make_agent({"kind": "rbmle", "a": 60.0}, M0)
    drive(agent, M0, 10)
    for e in agent.episodes:
        back = EpisodeLog.from_dict(e.to_dict())
        assert back.policy == e.policy and back.start == e.start
        assert np.array_equal(back.counts.transition_counts, e.counts.transition_counts)
        for pol, res in e.indices.items():
            assert back.indices[pol].index_value == res.index_value
