"""Run records and their on-disk formats (JSON record, per-step CSV)."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agents import EpisodeLog, EpisodeSchedule
from ..estimation import TransitionCounts
from ..mdp import MdpModel

RECORD_SCHEMA = 1
CSV_COLUMNS = ("t", "x", "u", "r", "episode", "cumulative_regret")


@dataclass
class GroundTruth:
    """Constants of the true model that verification needs."""

    optimal_gain: float
    optimal_policies: list[tuple[int, ...]]
    gains: dict[tuple[int, ...], float]
    mixing_time: float
    conductivity: float
    gap_min: float | None

    def to_dict(self) -> dict:
        return {
            "optimal_gain": self.optimal_gain,
            "optimal_policies": [list(p) for p in self.optimal_policies],
            "gains": [[list(p), g] for p, g in sorted(self.gains.items())],
            "mixing_time": self.mixing_time,
            "conductivity": self.conductivity,
            "gap_min": self.gap_min,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(
            optimal_gain=data["optimal_gain"],
            optimal_policies=[tuple(p) for p in data["optimal_policies"]],
            gains={tuple(p): g for p, g in data["gains"]},
            mixing_time=data["mixing_time"],
            conductivity=data["conductivity"],
            gap_min=data["gap_min"],
        )


@dataclass
class RunRecord:
    seed: int
    horizon: int
    agent: dict
    model: MdpModel
    truth: GroundTruth
    b: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    episodes: list[EpisodeLog]
    initial_state: int = 0
    g1: np.ndarray = field(default=None)
    g2: bool = True

    @property
    def regret(self) -> np.ndarray:
        """``R(t) = t J* - sum_{s <= t} r(s)`` for ``t = 1..T``."""
        t = np.arange(1, self.horizon + 1)
        return t * self.truth.optimal_gain - np.cumsum(self.rewards)

    @property
    def episode_index(self) -> np.ndarray:
        t = np.arange(1, self.horizon + 1)
        return np.floor(np.log2(t + 1)).astype(int)

    def final_counts(self) -> TransitionCounts:
        return transition_counts_at(self, self.horizon)

    def to_dict(self) -> dict:
        return {
            "schema": RECORD_SCHEMA,
            "seed": self.seed,
            "horizon": self.horizon,
            "initial_state": self.initial_state,
            "agent": self.agent,
            "b": self.b,
            "model": self.model.to_dict(),
            "truth": self.truth.to_dict(),
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "episodes": [ep.to_dict() for ep in self.episodes],
            "g1": [int(v) for v in self.g1],
            "g2": bool(self.g2),
            "regret_final": float(self.regret[-1]),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        if data.get("schema") != RECORD_SCHEMA:
            raise ValueError(f"unsupported record schema {data.get('schema')!r}")
        model = MdpModel(
            np.asarray(data["model"]["transitions"], dtype=float),
            np.asarray(data["model"]["rewards"], dtype=float),
            np.asarray(data["model"]["support_mask"], dtype=bool),
            float(data["model"]["p_min"]),
        )
        return cls(
            seed=data["seed"],
            horizon=data["horizon"],
            agent=data["agent"],
            model=model,
            truth=GroundTruth.from_dict(data["truth"]),
            b=data["b"],
            states=np.asarray(data["states"], dtype=int),
            actions=np.asarray(data["actions"], dtype=int),
            rewards=np.asarray(data["rewards"], dtype=float),
            episodes=[EpisodeLog.from_dict(ep) for ep in data["episodes"]],
            initial_state=data.get("initial_state", 0),
            g1=np.asarray(data["g1"], dtype=bool),
            g2=bool(data["g2"]),
        )


def transition_counts_at(record: RunRecord, t: int) -> TransitionCounts:
    """Counts ``n(.;t)``: the first ``t - 1`` transitions of the trajectory."""
    n_x, n_u = record.model.num_states, record.model.num_actions
    trans = np.zeros((n_x, n_u, n_x), dtype=np.int64)
    x, u, y = record.states[: t - 1], record.actions[: t - 1], record.states[1:t]
    np.add.at(trans, (x, u, y), 1)
    return TransitionCounts.from_transition_counts(trans, t)


def confidence_flags(states, actions, model: MdpModel, b: float) -> np.ndarray:
    """``p in C(t)`` for every ``t = 1..T`` from one trajectory."""
    horizon = len(states)
    n_x, n_u = model.num_states, model.num_actions
    flat = (states[:-1] * n_u + actions[:-1]) * n_x + states[1:]
    onehot = np.zeros((horizon, n_x * n_u * n_x), dtype=np.int64)
    onehot[np.arange(1, horizon), flat] = 1
    trans = np.cumsum(onehot, axis=0).reshape(horizon, n_x, n_u, n_x)
    visits = trans.sum(axis=3)
    t = np.arange(1, horizon + 1)
    level = b * np.log(t) + np.log(n_x**2 * n_u)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_hat = trans / np.maximum(visits, 1)[..., None]
        radius = np.where(visits > 0, np.sqrt(level[:, None, None] / np.maximum(visits, 1)), np.inf)
    deviation = np.abs(p_hat - model.transitions[None]).max(axis=3)
    return np.all(deviation <= radius, axis=(1, 2))


def visit_targets(record: RunRecord, horizon: int | None = None) -> np.ndarray:
    """``y_{x,u} = sum_k floor(|E_k| / (2 T_p))`` over episodes whose policy plays ``u`` in ``x``.

    The last episode is truncated at the horizon.
    """
    horizon = record.horizon if horizon is None else horizon
    n_x, n_u = record.model.num_states, record.model.num_actions
    y = np.zeros((n_x, n_u))
    mix = record.truth.mixing_time
    for ep in record.episodes:
        if ep.start > horizon:
            break
        length = min(EpisodeSchedule.length(ep.k), horizon - ep.start + 1)
        y[np.arange(n_x), list(ep.policy)] += math.floor(length / (2.0 * mix))
    return y


def visit_event(record: RunRecord, horizon: int | None = None) -> bool:
    """Whether ``n(x,u;T) >= y/2 - sqrt(y log T)`` holds for every pair."""
    horizon = record.horizon if horizon is None else horizon
    y = visit_targets(record, horizon)
    n = transition_counts_at(record, horizon).visit_counts
    return bool(np.all(n >= y / 2.0 - np.sqrt(y * math.log(horizon))))


def truncate(record: RunRecord, horizon: int) -> RunRecord:
    """The same run observed only up to ``horizon``.

    Agents are causal, so the prefix is exactly the run that a shorter
    horizon with the same seed would have produced.
    """
    if not 2 <= horizon <= record.horizon:
        raise ValueError(f"horizon must lie in [2, {record.horizon}]")
    out = RunRecord(
        seed=record.seed,
        horizon=horizon,
        agent=record.agent,
        model=record.model,
        truth=record.truth,
        b=record.b,
        states=record.states[:horizon].copy(),
        actions=record.actions[:horizon].copy(),
        rewards=record.rewards[:horizon].copy(),
        episodes=[ep for ep in record.episodes if ep.start <= horizon],
        initial_state=record.initial_state,
        g1=record.g1[:horizon].copy(),
    )
    out.g2 = visit_event(out)
    return out


# ---------------------------------------------------------------------------
# Persistence


def dumps_record(record: RunRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"))


def record_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    regret = record.regret
    episodes = record.episode_index
    for i in range(record.horizon):
        writer.writerow(
            [i + 1, int(record.states[i]), int(record.actions[i]), repr(float(record.rewards[i])), int(episodes[i]), repr(float(regret[i]))]
        )
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_record(record: RunRecord, directory: str | os.PathLike, write_csv: bool = True) -> Path:
    directory = Path(directory)
    stem = f"record_{record.agent.get('kind', 'agent')}_seed{record.seed}"
    path = directory / f"{stem}.json"
    atomic_write(path, dumps_record(record))
    if write_csv:
        atomic_write(directory / f"{stem}.csv", record_csv(record))
    return path


def load_record(path: str | os.PathLike) -> RunRecord:
    with open(path, encoding="utf-8") as fh:
        return RunRecord.from_dict(json.load(fh))


def load_records(directory: str | os.PathLike) -> list[RunRecord]:
    paths = sorted(Path(directory).glob("record_*.json"))
    return [load_record(p) for p in paths]

