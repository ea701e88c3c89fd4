"""Online transition counts, the empirical MLE, KL divergence between rows,
and the two confidence radii around the MLE.

All logarithms are natural.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class UnsupportedTransitionError(ValueError):
    """An observed transition has zero probability under the known support."""


@dataclass
class TransitionCounts:
    """Sufficient statistics ``n(x,u;t)`` and ``n(x,y,u;t)``.

    ``transition_counts[x, u, y]`` counts ``x -> y`` moves under ``u``. The
    clock starts at 1 and advances by one per recorded transition, so the
    total number of recorded transitions is always ``clock - 1``.
    """

    visit_counts: np.ndarray
    transition_counts: np.ndarray
    clock: int = 1

    @classmethod
    def empty(cls, num_states: int, num_actions: int) -> "TransitionCounts":
        return cls(
            np.zeros((num_states, num_actions), dtype=np.int64),
            np.zeros((num_states, num_actions, num_states), dtype=np.int64),
            1,
        )

    @classmethod
    def from_transition_counts(cls, transition_counts, clock: int | None = None) -> "TransitionCounts":
        trans = np.asarray(transition_counts, dtype=np.int64)
        visits = trans.sum(axis=2)
        total = int(visits.sum())
        return cls(visits, trans, total + 1 if clock is None else int(clock))

    @property
    def num_states(self) -> int:
        return self.visit_counts.shape[0]

    @property
    def num_actions(self) -> int:
        return self.visit_counts.shape[1]

    def copy(self) -> "TransitionCounts":
        return TransitionCounts(self.visit_counts.copy(), self.transition_counts.copy(), self.clock)

    def to_dict(self) -> dict:
        return {"clock": self.clock, "transition_counts": self.transition_counts.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "TransitionCounts":
        return cls.from_transition_counts(data["transition_counts"], data["clock"])


def record_transition(counts: TransitionCounts, x: int, u: int, y: int, support_mask: np.ndarray | None = None) -> TransitionCounts:
    """Record ``x -> y`` under ``u`` in place and return ``counts``."""
    if support_mask is not None and not support_mask[x, u, y]:
        raise UnsupportedTransitionError(f"observed transition {x} -> {y} under action {u} is outside the support")
    counts.visit_counts[x, u] += 1
    counts.transition_counts[x, u, y] += 1
    counts.clock += 1
    return counts


def empirical_model(counts: TransitionCounts) -> np.ndarray:
    """Empirical MLE ``n(x,y,u) / max(n(x,u), 1)``; unvisited rows are zero."""
    denom = np.maximum(counts.visit_counts, 1)[:, :, None]
    return counts.transition_counts / denom


def kl_row(p1, p2) -> float:
    """``KL(p1, p2)`` with ``0 log 0 = 0`` and ``inf`` when ``p2`` misses mass of ``p1``."""
    p = np.asarray(p1, dtype=float)
    q = np.asarray(p2, dtype=float)
    on = p > 0
    if np.any(q[on] <= 0):
        return math.inf
    return max(float(np.sum(p[on] * np.log(p[on] / q[on]))), 0.0)


def log_confidence_level(t: float, b: float, num_states: int, num_actions: int) -> float:
    """``log(t^b |X|^2 |U|)``, shared by the confidence radius and the bias schedule."""
    return b * math.log(t) + math.log(num_states**2 * num_actions)


def confidence_radius_d1(counts: TransitionCounts, x: int, u: int, b: float, num_states: int, num_actions: int) -> float:
    n = int(counts.visit_counts[x, u])
    if n == 0:
        return math.inf
    return math.sqrt(log_confidence_level(counts.clock, b, num_states, num_actions) / n)


def confidence_radii(counts: TransitionCounts, b: float, t: int | None = None) -> np.ndarray:
    """``d1(x,u;t)`` for every pair, ``inf`` where ``n(x,u) = 0``."""
    t = counts.clock if t is None else t
    level = log_confidence_level(t, b, counts.num_states, counts.num_actions)
    n = counts.visit_counts.astype(float)
    with np.errstate(divide="ignore"):
        return np.where(n > 0, np.sqrt(level / np.maximum(n, 1)), np.inf)


def in_confidence_set(counts: TransitionCounts, theta: np.ndarray, b: float, support_mask: np.ndarray | None = None) -> bool:
    """Whether ``theta`` lies entrywise within ``d1`` of the empirical MLE."""
    theta = np.asarray(theta, dtype=float)
    if support_mask is not None and np.any(theta[~support_mask] != 0):
        raise ValueError("theta puts mass outside the support mask")
    radii = confidence_radii(counts, b)
    deviation = np.abs(theta - empirical_model(counts)).max(axis=2)
    return bool(np.all(deviation <= radii))


def deviation_radius_d2(alpha_value: float, n: int) -> float:
    """``sqrt(alpha / (2 n))``, ``inf`` for ``n = 0``."""
    if n <= 0:
        return math.inf
    return math.sqrt(alpha_value / (2.0 * n))
