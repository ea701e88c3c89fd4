import math

import numpy as np
import pytest
from conftest import admissible_a

from rbmle.agents import Agent, EpisodeLog, make_agent
from rbmle.estimation import TransitionCounts
from rbmle.harness.constants import TheoremConstants, lemma1_bound, lemma1_series, theorem_bound
from rbmle.harness.records import (
    CSV_COLUMNS,
    dumps_record,
    load_record,
    load_records,
    record_csv,
    save_record,
    transition_counts_at,
    truncate,
    visit_event,
    visit_targets,
)
from rbmle.harness.regret import BUCKETS, episode_regret, expected_regret, log_fit, regret_buckets
from rbmle.harness.simulate import SimulationError, ground_truth, run_seeds, simulate
from rbmle.harness.verify import (
    fixed_policy_rewards,
    verify_accounting,
    verify_lemma1,
    verify_lemma2,
    verify_lemma3,
    verify_lemma4,
    verify_lemma6_visits,
    verify_lemma7_mixing,
    verify_records,
)
from rbmle.index import OptimizerConfig, compute_indices
from rbmle.mdp import enumerate_policies, gain, validate_mdp
from rbmle.models import reference_model

M0 = reference_model()
A0 = admissible_a(M0)
RBMLE = {"kind": "rbmle", "a": A0}


@pytest.fixture(scope="module")
def rbmle_records():
    return run_seeds(M0, RBMLE, 512, range(4))


@pytest.fixture(scope="module")
def constants():
    return TheoremConstants.from_truth(M0, ground_truth(M0), A0)


def test_same_seed_gives_identical_records():
    a = simulate(M0, make_agent(RBMLE, M0), 300, seed=7)
    b = simulate(M0, make_agent(RBMLE, M0), 300, seed=7)
    assert dumps_record(a) == dumps_record(b)
    c = simulate(M0, make_agent(RBMLE, M0), 300, seed=8)
    assert not np.array_equal(a.states, c.states)


def test_truncated_run_equals_shorter_run():
    long = simulate(M0, make_agent(RBMLE, M0), 400, seed=3)
    short = simulate(M0, make_agent(RBMLE, M0), 200, seed=3)
    assert dumps_record(truncate(long, 200)) == dumps_record(short)
    with pytest.raises(ValueError):
        truncate(long, 401)


def test_parallel_runs_match_serial():
    serial = run_seeds(M0, {"kind": "epsilon-greedy", "epsilon": 0.2}, 256, [0, 1, 2])
    parallel = run_seeds(M0, {"kind": "epsilon-greedy", "epsilon": 0.2}, 256, [0, 1, 2], n_jobs=2)
    assert [dumps_record(r) for r in serial] == [dumps_record(r) for r in parallel]


def test_equal_rewards_give_zero_regret():
    m = validate_mdp(M0.transitions, np.full((2, 2), 0.4), p_min=0.1)
    rec = simulate(m, make_agent({"kind": "uniform-random"}, m), 500, seed=1)
    assert np.allclose(rec.regret, 0.0, atol=1e-9)
    assert all(v == pytest.approx(0.0, abs=1e-9) for v in regret_buckets(rec).values())


def test_regret_curve_matches_rewards(rbmle_records):
    rec = rbmle_records[0]
    t = np.arange(1, rec.horizon + 1)
    assert np.allclose(rec.regret, t * rec.truth.optimal_gain - np.cumsum(M0.rewards[rec.states, rec.actions]), atol=1e-9)
    assert rec.states[0] == 0


def test_bucket_accounting_identity(rbmle_records):
    for rec in rbmle_records:
        assert sum(regret_buckets(rec).values()) == pytest.approx(rec.regret[-1], abs=1e-9)
        parts = episode_regret(rec)
        assert sum(p.length for p in parts) == rec.horizon
        assert all(p.bucket in BUCKETS[:3] for p in parts)
    assert verify_accounting(rbmle_records)["passed"]


def test_oracle_has_no_gap_regret():
    recs = run_seeds(M0, {"kind": "oracle"}, 1024, range(3))
    for rec in recs:
        b = regret_buckets(rec)
        assert b["R1"] == b["R2"] == b["R3"] == 0.0
        assert b["R4"] == pytest.approx(rec.regret[-1], abs=1e-9)


def test_oracle_regret_within_mixing_time():
    truth = ground_truth(M0)
    recs = run_seeds(M0, {"kind": "oracle"}, 2**12, range(100))
    final = np.array([r.regret[-1] for r in recs])
    sigma = final.std(ddof=1) / math.sqrt(len(final))
    assert final.mean() <= truth.mixing_time + 3 * sigma


def test_agent_errors_carry_the_time_step():
    class Broken(Agent):
        def choose_policy(self, k, t):
            if k == 3:
                raise RuntimeError("boom")
            return (0, 0), None

    with pytest.raises(SimulationError, match="t=7"):
        simulate(M0, Broken(2, 2, M0.support_mask, M0.rewards), 20, seed=0)
    with pytest.raises(ValueError):
        simulate(M0, make_agent({"kind": "oracle"}, M0), 1, seed=0)


def test_expected_regret_summary(rbmle_records):
    summary = expected_regret(rbmle_records)
    curves = np.vstack([r.regret for r in rbmle_records])
    assert summary.at(100)[0] == pytest.approx(curves[:, 99].mean())
    assert summary.at(100)[1] == pytest.approx(curves[:, 99].std(ddof=1) / 2)
    assert summary.accounting_error() <= 1e-9
    with pytest.raises(ValueError):
        expected_regret([rbmle_records[0], truncate(rbmle_records[1], 256)])
    with pytest.raises(ValueError):
        expected_regret([])


def test_log_fit_recovers_exact_logs():
    ts = [2**k for k in range(4, 12)]
    slope, intercept, r2 = log_fit(ts, [3.0 * math.log(t) + 2.0 for t in ts])
    assert slope == pytest.approx(3.0) and intercept == pytest.approx(2.0) and r2 == pytest.approx(1.0)
    assert log_fit(ts, [float(t) for t in ts])[2] < 0.9


def test_counts_reconstructed_from_trajectory(rbmle_records):
    rec = rbmle_records[0]
    for ep in rec.episodes:
        again = transition_counts_at(rec, ep.start)
        assert np.array_equal(again.transition_counts, ep.counts.transition_counts)


def test_confidence_flags_recomputed_from_counts(rbmle_records):
    from rbmle.estimation import in_confidence_set

    rec = rbmle_records[1]
    for t in (2, 5, 17, 100, 511):
        assert rec.g1[t - 1] == in_confidence_set(transition_counts_at(rec, t), M0.transitions, rec.b)


def test_visit_targets_follow_episode_policies():
    rec = simulate(M0, make_agent({"kind": "oracle"}, M0), 300, seed=0)
    mix = rec.truth.mixing_time
    pol = rec.episodes[0].policy
    expected = np.zeros((2, 2))
    for ep in rec.episodes:
        length = min(2**ep.k, 300 - ep.start + 1)
        expected[np.arange(2), list(pol)] += math.floor(length / (2 * mix))
    assert np.array_equal(visit_targets(rec), expected)
    assert visit_event(rec) == rec.g2


def test_lemma1_bound_series():
    for b in (2.5, 3.0, 4.0):
        direct = sum(lemma1_bound(t, b, 2, 2) for t in range(2, 200_000))
        assert lemma1_series(b, 2, 2) == pytest.approx(direct, rel=1e-6)
        assert lemma1_series(b, 2, 2) <= 8 / (2**2 * 2)
    assert lemma1_bound(1, 3, 2, 2) == pytest.approx(0.25)


def test_constants(constants):
    truth = ground_truth(M0)
    c = constants
    assert c.gamma == pytest.approx(16 / (2 * A0 * 0.1 * truth.optimal_gain))
    assert c.beta_upper == pytest.approx(1 - c.gamma * truth.optimal_gain / truth.gap_min)
    assert 0 < c.beta < c.beta_upper and c.c > 0 and c.admissible
    assert c.c1 == pytest.approx(10 / truth.conductivity**2)
    assert c.n_c(2**12) == pytest.approx(c.alpha(2**12) / c.c**2)
    bounds = [theorem_bound(c, t) for t in (2, 2**4, 2**8, 2**12, 2**16)]
    assert all(b2 > b1 for b1, b2 in zip(bounds, bounds[1:]))
    assert bounds[0] >= c.C
    with pytest.raises(ValueError):
        theorem_bound(c, 1)


def test_beta_interval_empty_iff_inadmissible():
    truth = ground_truth(M0)
    low = TheoremConstants.from_truth(M0, truth, 0.9 * A0 / 1.5)
    assert not low.admissible and low.beta is None and low.beta_upper <= 0
    with pytest.raises(ValueError):
        low.C
    with pytest.raises(ValueError):
        TheoremConstants.from_truth(M0, truth, A0, beta=1.0)


def test_lemma1_deterministic_support_has_no_violations():
    m = validate_mdp([[[0.0, 1.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]]], [[0.2, 0.4], [0.9, 0.6]])
    recs = run_seeds(m, {"kind": "uniform-random"}, 300, range(5))
    assert all(r.g1.all() for r in recs)
    report = verify_lemma1(recs)
    assert report["passed"] and all(row["frequency"] == 0 for row in report["grid"])


def test_lemma1_detects_excess_failures(rbmle_records):
    broken = [truncate(r, 512) for r in rbmle_records]
    for r in broken:
        r.g1[:] = False
    assert not verify_lemma1(broken)["passed"]


def test_lemma2_and_lemma3_on_runs(rbmle_records, constants):
    assert verify_lemma2(rbmle_records)["passed"]
    report = verify_lemma3(rbmle_records, constants)
    assert report["passed"] and report["checked"] > 0


def test_lemma2_detects_a_displaced_model(rbmle_records):
    rec = truncate(rbmle_records[0], 512)
    ep = rec.episodes[-1]
    x, u = np.unravel_index(np.argmax(ep.counts.visit_counts), ep.counts.visit_counts.shape)
    pol = next(p for p in ep.indices if p[x] == u)
    res = ep.indices[pol]
    theta = res.biased_model.copy()
    theta[x, u] = [1.0, 0.0] if theta[x, u, 0] < 0.5 else [0.0, 1.0]  # a vertex far from p_hat
    # a small alpha makes d2 tight enough for the displacement to register
    res_bad = type(res)(res.policy, theta, res.index_value, res.gain, res.penalty, 1.0)
    rec.episodes = rec.episodes[:-1] + [EpisodeLog(ep.k, ep.start, ep.policy, ep.counts, {**ep.indices, pol: res_bad})]
    report = verify_lemma2([rec])
    assert not report["passed"] and report["violations"]


def test_lemma3_on_a_no_data_episode(constants):
    counts = TransitionCounts.empty(2, 2)
    alpha = constants.alpha(1)
    table = compute_indices(enumerate_policies(2, 2), counts, alpha, M0.support_mask, M0.rewards)
    best = max(table[p].index_value for p in ground_truth(M0).optimal_policies)
    assert best >= alpha * (1 - constants.gamma) * constants.optimal_gain


def _saturated_record(constants, scale):
    """A record whose only episode starts from counts ``scale * p`` (so ``p_hat = p``)."""
    rec = simulate(M0, make_agent({"kind": "oracle"}, M0), 8, seed=0)
    trans = np.rint(scale * M0.transitions).astype(np.int64)
    counts = TransitionCounts.from_transition_counts(trans, int(trans.sum()) + 1)
    alpha = constants.alpha(counts.clock)
    table = compute_indices(enumerate_policies(2, 2), counts, alpha, M0.support_mask, M0.rewards, OptimizerConfig())
    rec.episodes = [EpisodeLog(1, 1, max(table, key=lambda p: table[p].index_value), counts, table)]
    rec.g1[:] = True
    return rec, alpha


def test_lemma4_with_saturated_counts(constants):
    # visit counts far past alpha / c^2 are out of reach of short runs, so build the episode directly
    scale = 10 * constants.n_c(1e12)
    rec, alpha = _saturated_record(constants, scale)
    assert scale > alpha / constants.c**2  # every row is visited about scale times
    report = verify_lemma4([rec], constants)
    assert report["checked"] == len(enumerate_policies(2, 2)) - len(ground_truth(M0).optimal_policies)
    assert report["passed"] and not report["vacuous"]


def test_lemma4_is_vacuous_on_short_runs(rbmle_records, constants):
    report = verify_lemma4(rbmle_records, constants)
    assert report["passed"] and report["vacuous"] and report["margin"] is None


def test_lemma6_and_lemma7(rbmle_records):
    assert verify_lemma6_visits(rbmle_records)["passed"]
    truth = ground_truth(M0)
    report = verify_lemma7_mixing(M0, truth.optimal_policies[0], 2**10, 200, truth.mixing_time)
    assert report["passed"] and len(report["starts"]) == 2
    # a policy credited with an impossible mixing time fails
    assert not verify_lemma7_mixing(M0, truth.optimal_policies[0], 2**10, 200, -5.0)["passed"]


def test_fixed_policy_rewards_average_to_gain():
    pol = (0, 1)
    totals = fixed_policy_rewards(M0, pol, 4000, 300, start=0, seed=2)
    assert totals.mean() / 4000 == pytest.approx(gain(M0, pol), abs=3 * totals.std() / 4000 / math.sqrt(300) + 1e-3)


def test_verify_records_lists_every_check(rbmle_records, constants):
    names = [r["check"] for r in verify_records(rbmle_records, constants)]
    assert names == ["accounting", "lemma1", "lemma6", "lemma2", "lemma3", "lemma4"]
    baseline = run_seeds(M0, {"kind": "ce-greedy"}, 128, range(2))
    assert [r["check"] for r in verify_records(baseline)] == ["accounting", "lemma1", "lemma6"]


def test_record_round_trip(tmp_path, rbmle_records):
    rec = rbmle_records[2]
    path = save_record(rec, tmp_path)
    back = load_record(path)
    assert dumps_record(back) == dumps_record(rec)
    assert [dumps_record(r) for r in load_records(tmp_path)] == [dumps_record(rec)]
    lines = (tmp_path / path.name.replace(".json", ".csv")).read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == rec.horizon + 1
    last = lines[-1].split(",")
    assert int(last[0]) == rec.horizon and float(last[-1]) == rec.regret[-1]
    assert record_csv(back) == record_csv(rec)


def test_record_schema_is_checked(rbmle_records):
    data = rbmle_records[0].to_dict()
    data["schema"] = 99
    with pytest.raises(ValueError):
        type(rbmle_records[0]).from_dict(data)
