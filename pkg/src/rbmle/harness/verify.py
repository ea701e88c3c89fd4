"""Empirical checks of the concentration, index and regret guarantees.

Every check returns a JSON-ready dict with at least ``passed`` and
``margin`` (non-negative iff the check passed; ``None`` when nothing was
checked). Probabilistic claims get a 3-sigma binomial/normal slack.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..estimation import empirical_model
from ..mdp import MdpModel, gain
from .constants import TheoremConstants, lemma1_bound, theorem_bound
from .records import RunRecord, visit_event
from .regret import expected_regret, log_fit

SIGMAS = 3.0
INDEX_TOL = 1e-6


def _report(name: str, passed: bool, margin, **details) -> dict:
    return {"check": name, "passed": bool(passed), "margin": None if margin is None else float(margin), **details}


def log_grid(horizon: int, points: int = 25) -> list[int]:
    return sorted({int(round(t)) for t in np.geomspace(2, horizon, points)})


def verify_lemma1(records: Sequence[RunRecord], b: float | None = None, grid: Sequence[int] | None = None) -> dict:
    """Fraction of runs with ``p`` outside ``C(t)`` against its per-``t`` bound."""
    horizon = min(r.horizon for r in records)
    b = records[0].b if b is None else b
    n_x, n_u = records[0].model.num_states, records[0].model.num_actions
    grid = log_grid(horizon) if grid is None else list(grid)
    misses = np.vstack([~r.g1[:horizon] for r in records])
    runs = len(records)
    rows, margin = [], math.inf
    for t in grid:
        bound = lemma1_bound(t, b, n_x, n_u)
        slack = SIGMAS * math.sqrt(bound * (1 - bound) / runs)
        freq = float(misses[:, t - 1].mean())
        margin = min(margin, bound + slack - freq)
        rows.append({"t": t, "frequency": freq, "bound": bound, "slack": slack})
    return _report("lemma1", margin >= 0, margin, runs=runs, b=b, grid=rows)


def _index_episodes(records):
    for rec in records:
        for ep in rec.episodes:
            if ep.indices:
                yield rec, ep


def verify_lemma2(records: Sequence[RunRecord]) -> dict:
    """Every biased model stays within ``d2 = sqrt(alpha / 2n)`` of the estimate."""
    checked, violations, margin = 0, [], math.inf
    for rec, ep in _index_episodes(records):
        p_hat = empirical_model(ep.counts)
        n = ep.counts.visit_counts.astype(float)
        for pol, res in ep.indices.items():
            with np.errstate(divide="ignore"):
                d2 = np.where(n > 0, np.sqrt(res.alpha / (2.0 * np.maximum(n, 1))), np.inf)
            dev = np.abs(res.biased_model - p_hat).max(axis=2)
            room = d2 + INDEX_TOL - dev
            checked += 1
            worst = float(room[n > 0].min()) if np.any(n > 0) else math.inf
            margin = min(margin, worst)
            if worst < 0:
                violations.append({"seed": rec.seed, "k": ep.k, "policy": list(pol), "excess": -worst})
    margin = None if checked == 0 or margin == math.inf else margin
    return _report("lemma2", not violations, margin, checked=checked, violations=violations)


def verify_lemma3(records: Sequence[RunRecord], constants: TheoremConstants) -> dict:
    """On confidence-event episodes, some optimal policy's index is at least ``alpha (1-gamma) J*``."""
    optimal = records[0].truth.optimal_policies
    j_star = constants.optimal_gain
    checked, violations, margin = 0, [], math.inf
    for rec, ep in _index_episodes(records):
        if not rec.g1[ep.start - 1]:
            continue
        best = max(ep.indices[p].index_value for p in optimal)
        alpha = ep.indices[optimal[0]].alpha
        room = best - alpha * (1 - constants.gamma) * j_star + INDEX_TOL
        checked += 1
        margin = min(margin, room)
        if room < 0:
            violations.append({"seed": rec.seed, "k": ep.k, "shortfall": -room})
    margin = None if checked == 0 else margin
    return _report(
        "lemma3", not violations, margin, checked=checked, gamma=constants.gamma, admissible=constants.admissible,
        violations=violations,
    )


def verify_lemma4(records: Sequence[RunRecord], constants: TheoremConstants) -> dict:
    """Once every controlled row of a suboptimal policy is visited more than ``alpha / c^2`` times,
    its biased model is close to ``p``, its index is below ``alpha (J(p, pi) + beta Delta_min)``
    and below the optimal index."""
    if constants.c is None:
        return _report("lemma4", False, None, reason="a is not admissible", checked=0, violations=[])
    truth = records[0].truth
    optimal = truth.optimal_policies
    model = records[0].model
    radius = constants.c * (1 / math.sqrt(2) + 1 / math.sqrt(constants.a))
    checked, violations, margin = 0, [], math.inf
    states = np.arange(model.num_states)
    for rec, ep in _index_episodes(records):
        if not rec.g1[ep.start - 1]:
            continue
        best_opt = max(ep.indices[p].index_value for p in optimal)
        for pol, res in ep.indices.items():
            if pol in optimal:
                continue
            act = np.asarray(pol)
            needed = res.alpha / constants.c**2
            if not np.all(ep.counts.visit_counts[states, act] > needed):
                continue
            checked += 1
            dev = float(np.abs(res.biased_model[states, act] - model.transitions[states, act]).max())
            cap = res.alpha * (truth.gains[pol] + constants.beta * constants.gap_min)
            rooms = {"closeness": radius - dev, "index_cap": cap - res.index_value, "ordering": best_opt - res.index_value}
            margin = min(margin, *rooms.values())
            failed = [name for name, room in rooms.items() if not room > 0]
            if failed:
                violations.append({"seed": rec.seed, "k": ep.k, "policy": list(pol), "failed": failed})
    margin = None if checked == 0 else margin
    return _report(
        "lemma4", not violations, margin, checked=checked, vacuous=checked == 0, c=constants.c, violations=violations
    )


def verify_lemma6_visits(records: Sequence[RunRecord]) -> dict:
    """Share of runs whose visit counts fall short of ``y/2 - sqrt(y log T)``."""
    horizon = records[0].horizon
    if any(r.horizon != horizon for r in records):
        raise ValueError("records have mismatched horizons")
    n_x, n_u = records[0].model.num_states, records[0].model.num_actions
    failures = sum(not visit_event(r) for r in records)
    runs = len(records)
    q = min(n_x * n_u / horizon, 1.0)
    limit = q + SIGMAS * math.sqrt(q * (1 - q) / runs)
    freq = failures / runs
    return _report("lemma6", freq <= limit, limit - freq, runs=runs, failures=failures, frequency=freq, limit=limit)


def fixed_policy_rewards(
    model: MdpModel, policy: Sequence[int], horizon: int, runs: int, start: int, seed: int = 0
) -> np.ndarray:
    """Total reward of ``runs`` independent trajectories of a fixed policy (vectorized over runs)."""
    act = np.asarray(policy)
    states = np.arange(model.num_states)
    cumulative = np.cumsum(model.transitions[states, act], axis=1)
    cumulative[:, -1] = 1.0
    reward = model.rewards[states, act]
    rng = np.random.default_rng([seed, start])
    x = np.full(runs, start, dtype=np.int64)
    total = np.zeros(runs)
    for _ in range(horizon):
        total += reward[x]
        u = rng.random(runs)
        x = (u[:, None] >= cumulative[x]).sum(axis=1)
    return total


def verify_lemma7_mixing(
    model: MdpModel, policy: Sequence[int], horizon: int, seeds: int, mixing_time: float, seed: int = 0
) -> dict:
    """From every start state, ``T J(p, pi) - E sum r <= T_p``."""
    j = gain(model, policy)
    rows, margin = [], math.inf
    for x in range(model.num_states):
        totals = fixed_policy_rewards(model, policy, horizon, seeds, x, seed)
        deficit = horizon * j - float(totals.mean())
        slack = SIGMAS * float(totals.std(ddof=1)) / math.sqrt(seeds) if seeds > 1 else 0.0
        margin = min(margin, mixing_time + slack - deficit)
        rows.append({"start": x, "deficit": deficit, "slack": slack})
    return _report("lemma7", margin >= 0, margin, policy=list(policy), mixing_time=mixing_time, starts=rows)


def verify_theorem(records: Sequence[RunRecord], constants: TheoremConstants, horizons: Sequence[int]) -> dict:
    """Mean regret under the theorem's ceiling at each horizon."""
    summary = expected_regret(list(records))
    rows, margin = [], math.inf
    for t in horizons:
        mean, se = summary.at(t)
        bound = theorem_bound(constants, t)
        margin = min(margin, bound - mean)
        rows.append({"T": t, "mean": mean, "stderr": se, "bound": bound})
    return _report("theorem", margin > 0, margin, runs=summary.runs, horizons=rows)


def verify_sublinear(records: Sequence[RunRecord], short: int, long: int, ratio: float = 0.5) -> dict:
    """``mean R(long)/long < ratio * mean R(short)/short``."""
    summary = expected_regret(list(records))
    rate_short = summary.at(short)[0] / short
    rate_long = summary.at(long)[0] / long
    return _report(
        "sublinear", rate_long < ratio * rate_short, ratio * rate_short - rate_long, rate_short=rate_short,
        rate_long=rate_long,
    )


def verify_log_growth(records: Sequence[RunRecord], horizons: Sequence[int], min_r2: float = 0.9) -> dict:
    summary = expected_regret(list(records))
    means = [summary.at(t)[0] for t in horizons]
    slope, intercept, r2 = log_fit(horizons, means)
    return _report("log_growth", r2 >= min_r2, r2 - min_r2, r2=r2, slope=slope, intercept=intercept, means=means)


def verify_accounting(records: Sequence[RunRecord], tol: float = 1e-9) -> dict:
    err = expected_regret(list(records)).accounting_error()
    return _report("accounting", err <= tol, tol - err, error=err)


def verify_records(records: Sequence[RunRecord], constants: TheoremConstants | None = None) -> list[dict]:
    """Every record-based check that applies to this set of runs."""
    reports = [verify_accounting(records), verify_lemma1(records), verify_lemma6_visits(records)]
    if any(ep.indices for r in records for ep in r.episodes):
        reports.append(verify_lemma2(records))
        if constants is not None:
            reports += [verify_lemma3(records, constants), verify_lemma4(records, constants)]
    return reports
