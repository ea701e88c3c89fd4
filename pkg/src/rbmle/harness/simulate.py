"""Seeded agent/environment interaction."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from ..agents import Agent, make_agent
from ..mdp import MdpModel, UndefinedGapError, conductivity, gaps, mixing_time, optimal_policy, policy_gains
from .records import GroundTruth, RunRecord, confidence_flags, visit_event


class SimulationError(RuntimeError):
    pass


def ground_truth(model: MdpModel) -> GroundTruth:
    return _ground_truth_cached(_model_key(model))


def _model_key(model: MdpModel):
    return (
        model.transitions.tobytes(),
        model.transitions.shape,
        model.rewards.tobytes(),
        model.support_mask.tobytes(),
        model.p_min,
    )


@lru_cache(maxsize=64)
def _ground_truth_cached(key) -> GroundTruth:
    trans, shape, rew, mask, p_min = key
    n_x, n_u, _ = shape
    model = MdpModel(
        np.frombuffer(trans).reshape(shape),
        np.frombuffer(rew).reshape(n_x, n_u),
        np.frombuffer(mask, dtype=bool).reshape(shape),
        p_min,
    )
    best, optimal = optimal_policy(model)
    try:
        gap_min = gaps(model)[1]
    except UndefinedGapError:
        gap_min = None
    return GroundTruth(
        optimal_gain=best,
        optimal_policies=optimal,
        gains=policy_gains(model),
        mixing_time=mixing_time(model),
        conductivity=conductivity(model)[0],
        gap_min=gap_min,
    )


def simulate(
    model: MdpModel,
    agent: Agent,
    horizon: int,
    seed: int,
    initial_state: int = 0,
    b: float | None = None,
) -> RunRecord:
    """Run ``agent`` on ``model`` for ``horizon`` steps.

    The environment and the agent draw from independent child streams of
    ``SeedSequence(seed)``, so a record depends only on its inputs.
    """
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    env_seq, agent_seq = np.random.SeedSequence(seed).spawn(2)
    uniforms = np.random.default_rng(env_seq).random(horizon)
    agent.reset(np.random.default_rng(agent_seq))
    cumulative = np.cumsum(model.transitions, axis=2)
    cumulative[..., -1] = 1.0

    states = np.empty(horizon, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    x = int(initial_state)
    transition = None
    for t in range(1, horizon + 1):
        states[t - 1] = x
        try:
            u = agent.step(t, x, transition)
        except Exception as exc:
            raise SimulationError(f"agent failed at t={t} (state {x}): {exc}") from exc
        actions[t - 1] = u
        y = int(np.searchsorted(cumulative[x, u], uniforms[t - 1], side="right"))
        transition = (x, u, y)
        x = y

    if b is None:
        b = getattr(getattr(agent, "schedule", None), "b", 3.0)
    record = RunRecord(
        seed=int(seed),
        horizon=int(horizon),
        agent=agent.config(),
        model=model,
        truth=ground_truth(model),
        b=float(b),
        states=states,
        actions=actions,
        rewards=model.rewards[states, actions],
        episodes=list(agent.episodes),
        initial_state=int(initial_state),
        g1=confidence_flags(states, actions, model, b),
    )
    record.g2 = visit_event(record)
    return record


def _run_one(args) -> RunRecord:
    model, agent_config, horizon, seed, initial_state = args
    return simulate(model, make_agent(agent_config, model), horizon, seed, initial_state)


def run_seeds(
    model: MdpModel,
    agent_config: dict,
    horizon: int,
    seeds: Sequence[int],
    initial_state: int = 0,
    n_jobs: int = 1,
    progress: Callable[[RunRecord], None] | None = None,
) -> list[RunRecord]:
    """One record per seed, in seed-list order whatever ``n_jobs`` is."""
    jobs = [(model, agent_config, horizon, int(s), initial_state) for s in seeds]
    if n_jobs == 1:
        records = []
        for job in jobs:
            records.append(_run_one(job))
            if progress:
                progress(records[-1])
        return records
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        records = list(pool.map(_run_one, jobs))
    if progress:
        for rec in records:
            progress(rec)
    return records
