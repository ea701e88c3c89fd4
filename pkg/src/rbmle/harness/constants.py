"""Constants of the regret bound and the confidence-failure series."""
from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import zeta

from ..agents import BiasSchedule, admissible_threshold
from ..mdp import MdpModel
from .records import GroundTruth


def lemma1_bound(t, b: float, num_states: int, num_actions: int):
    """Per-step bound ``2 / (t^(2b-1) |X|^2 |U|)`` on P(p outside C(t))."""
    return 2.0 / (t ** (2 * b - 1) * num_states**2 * num_actions)


def lemma1_series(b: float, num_states: int, num_actions: int) -> float:
    """``sum_{t >= 2}`` of :func:`lemma1_bound` (closed form via the zeta function)."""
    return 2.0 * (float(zeta(2 * b - 1)) - 1.0) / (num_states**2 * num_actions)


@dataclass(frozen=True)
class TheoremConstants:
    num_states: int
    num_actions: int
    p_min: float
    a: float
    b: float
    optimal_gain: float
    gap_min: float
    mixing_time: float
    conductivity: float
    threshold: float  # a must exceed this
    gamma: float
    beta_upper: float  # beta ranges over (0, beta_upper)
    beta: float | None
    c: float | None
    c1: float

    @property
    def admissible(self) -> bool:
        return self.a > self.threshold

    @classmethod
    def from_truth(cls, model: MdpModel, truth: GroundTruth, a: float, b: float = 3.0, beta: float | None = None):
        if truth.gap_min is None:
            raise ValueError("every policy is optimal: the gap-dependent constants are undefined")
        n_x, n_u = model.num_states, model.num_actions
        j_star, gap = truth.optimal_gain, truth.gap_min
        kappa = truth.conductivity
        gamma = n_x**3 * n_u / (2.0 * a * model.p_min * j_star)
        upper = 1.0 - gamma * j_star / gap
        if upper > 0:
            beta = upper / 2.0 if beta is None else beta
            if not 0 < beta < upper:
                raise ValueError(f"beta must lie in (0, {upper:.6g})")
            c = beta * gap / (kappa * n_x**2 * (1 / math.sqrt(2) + 1 / math.sqrt(a)))
        else:
            beta, c = None, None
        return cls(
            num_states=n_x,
            num_actions=n_u,
            p_min=model.p_min,
            a=float(a),
            b=float(b),
            optimal_gain=j_star,
            gap_min=gap,
            mixing_time=truth.mixing_time,
            conductivity=kappa,
            threshold=admissible_threshold(n_x, n_u, model.p_min, gap),
            gamma=gamma,
            beta_upper=upper,
            beta=beta,
            c=c,
            c1=10.0 / kappa**2 if kappa > 0 else math.inf,
        )

    def _require_admissible(self):
        if self.beta is None:
            raise ValueError(f"a = {self.a} is not admissible (needs a > {self.threshold:.6g})")

    def alpha(self, t: float) -> float:
        return BiasSchedule(self.a, self.b, self.num_states, self.num_actions)(t)

    def n_c(self, horizon: float) -> float:
        """Visit count beyond which a suboptimal policy can no longer win."""
        self._require_admissible()
        return self.alpha(horizon) / self.c**2

    def _leading(self) -> float:
        self._require_admissible()
        n_x, n_u = self.num_states, self.num_actions
        ratio = (math.sqrt(self.a / 2.0) + 1.0) / (self.beta * self.gap_min)
        return self.c1 * self.conductivity**2 * n_x**5 * n_u * ratio**2

    @property
    def C(self) -> float:
        n_x, n_u = self.num_states, self.num_actions
        return (
            self._leading() * math.log(n_x**2 * n_u)
            + (self.conductivity * n_x * n_u + 1)
            + n_x * n_u
            + 8.0 / (n_x**2 * n_u)
        )

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["admissible"] = self.admissible
        out["C"] = self.C if self.beta is not None else None
        return out


def theorem_bound(constants: TheoremConstants, horizon: float) -> float:
    """Regret ceiling ``lead * ln T + (kappa |X||U| + 1) log2 T + C``."""
    if horizon < 2:
        raise ValueError("the bound is stated for T >= 2")
    n_x, n_u = constants.num_states, constants.num_actions
    return (
        constants._leading() * math.log(horizon)
        + (constants.conductivity * n_x * n_u + 1) * math.log2(horizon)
        + constants.C
    )

