"""Seed-averaged regret and its per-episode decomposition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..agents import EpisodeSchedule
from .records import RunRecord

BUCKETS = ("R1", "R2", "R3", "R4")


@dataclass
class EpisodeRegret:
    k: int
    start: int
    length: int
    policy: tuple[int, ...]
    realized: float
    gap_term: float
    mixing_term: float
    g1: bool
    bucket: str

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["policy"] = list(self.policy)
        return out


def episode_regret(record: RunRecord) -> list[EpisodeRegret]:
    """Split each episode's realized regret into ``|E_k| Delta(pi_k)`` plus a remainder.

    The gap term is filed under R3 when the confidence event fails at the
    episode start, else under R2 when the run's visit-count event fails, else
    under R1. The remainder (start-state and sampling effects) goes to R4.
    """
    j_star = record.truth.optimal_gain
    out = []
    for ep in record.episodes:
        length = min(EpisodeSchedule.length(ep.k), record.horizon - ep.start + 1)
        if length <= 0:
            continue
        earned = float(np.sum(record.rewards[ep.start - 1 : ep.start - 1 + length]))
        realized = length * j_star - earned
        gap = length * (j_star - record.truth.gains[tuple(ep.policy)])
        g1 = bool(record.g1[ep.start - 1])
        bucket = "R3" if not g1 else ("R2" if not record.g2 else "R1")
        out.append(EpisodeRegret(ep.k, ep.start, length, tuple(ep.policy), realized, gap, realized - gap, g1, bucket))
    return out


def regret_buckets(record: RunRecord) -> dict[str, float]:
    totals = dict.fromkeys(BUCKETS, 0.0)
    for ep in episode_regret(record):
        totals[ep.bucket] += ep.gap_term
        totals["R4"] += ep.mixing_term
    return totals


@dataclass
class RegretSummary:
    horizon: int
    runs: int
    mean: np.ndarray
    stderr: np.ndarray
    buckets: np.ndarray  # (runs, 4) in BUCKETS order
    totals: np.ndarray

    def at(self, t: int) -> tuple[float, float]:
        return float(self.mean[t - 1]), float(self.stderr[t - 1])

    def bucket_means(self) -> dict[str, float]:
        return dict(zip(BUCKETS, self.buckets.mean(axis=0).tolist()))

    def accounting_error(self) -> float:
        """Largest per-run gap between bucket sum and measured regret."""
        return float(np.max(np.abs(self.buckets.sum(axis=1) - self.totals)))

    def to_dict(self, grid=None) -> dict:
        grid = grid if grid is not None else _log_grid(self.horizon)
        return {
            "horizon": self.horizon,
            "runs": self.runs,
            "t": list(grid),
            "mean": [float(self.mean[t - 1]) for t in grid],
            "stderr": [float(self.stderr[t - 1]) for t in grid],
            "buckets": self.bucket_means(),
            "accounting_error": self.accounting_error(),
        }


def _log_grid(horizon: int) -> list[int]:
    grid = [2**j for j in range(1, int(np.log2(horizon)) + 1)]
    if grid[-1] != horizon:
        grid.append(horizon)
    return grid


def expected_regret(records: list[RunRecord]) -> RegretSummary:
    if not records:
        raise ValueError("need at least one record")
    horizon = records[0].horizon
    if any(r.horizon != horizon for r in records):
        raise ValueError("records have mismatched horizons")
    curves = np.vstack([r.regret for r in records])
    n = len(records)
    stderr = curves.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(horizon)
    buckets = np.array([[regret_buckets(r)[b] for b in BUCKETS] for r in records])
    return RegretSummary(horizon, n, curves.mean(axis=0), stderr, buckets, curves[:, -1].copy())


def log_fit(ts, values) -> tuple[float, float, float]:
    """Least-squares ``values ~ slope * ln t + intercept``; returns (slope, intercept, R^2)."""
    x = np.log(np.asarray(ts, dtype=float))
    y = np.asarray(values, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / total if total > 0 else 0.0
    return float(slope), float(intercept), float(r2)
