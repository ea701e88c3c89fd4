"""Episodic agents: the reward-biased MLE index policy and comparison baselines.

Every agent follows the same protocol. ``step(t, x, transition)`` is called
once per time step with the current state and the transition that led to it
(``None`` at ``t = 1``) and returns the action to apply. Policies are only
recomputed at episode starts ``tau_k = 2^k - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import TransitionCounts, empirical_model, log_confidence_level, record_transition
from .index import IndexResult, OptimizerConfig, compute_indices, select_policy
from .mdp import DEFAULT_ENUMERATION_CAP, MdpModel, Policy, enumerate_policies, optimal_policy

BASELINE_KINDS = ("ce-greedy", "epsilon-greedy", "oracle", "uniform-random")


class ClockError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedules


@dataclass(frozen=True)
class BiasSchedule:
    """``alpha(t) = a log(t^b |X|^2 |U|)``."""

    a: float
    b: float
    num_states: int
    num_actions: int

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("a must be positive")
        if self.b <= 2:
            raise ValueError("b must exceed 2")

    def __call__(self, t: float) -> float:
        return alpha_at(self, t)

    def admissible(self, p_min: float, gap_min: float) -> bool:
        return self.a > admissible_threshold(self.num_states, self.num_actions, p_min, gap_min)


def alpha_at(schedule: BiasSchedule, t: float) -> float:
    if t < 1:
        raise ValueError("alpha is defined for t >= 1")
    return schedule.a * log_confidence_level(t, schedule.b, schedule.num_states, schedule.num_actions)


def admissible_threshold(num_states: int, num_actions: int, p_min: float, gap_min: float) -> float:
    """Smallest admissible bias scale: ``|X|^3 |U| / (2 p_min gap_min)`` (exclusive)."""
    return num_states**3 * num_actions / (2.0 * p_min * gap_min)


class EpisodeSchedule:
    """Doubling episodes ``E_k = [2^k - 1, 2^(k+1) - 2]`` of length ``2^k``, ``k >= 1``."""

    @staticmethod
    def start(k: int) -> int:
        if k < 1:
            raise ValueError("episodes are numbered from 1")
        return 2**k - 1

    @staticmethod
    def length(k: int) -> int:
        return 2**k

    @staticmethod
    def episode_of(t: int) -> int:
        if t < 1:
            raise ValueError("time starts at 1")
        return (t + 1).bit_length() - 1

    @staticmethod
    def is_start(t: int) -> bool:
        return t >= 1 and (t + 1) & t == 0

    @staticmethod
    def episode_count_to(horizon: int) -> int:
        """Number of episodes that start within ``[1, horizon]``; at most ``ceil(log2 horizon)``."""
        return EpisodeSchedule.episode_of(horizon)


# ---------------------------------------------------------------------------
# Agents


@dataclass
class EpisodeLog:
    k: int
    start: int
    policy: Policy
    counts: TransitionCounts
    indices: dict[Policy, IndexResult] | None = None

    def to_dict(self) -> dict:
        out = {"k": self.k, "start": self.start, "policy": list(self.policy), "counts": self.counts.to_dict()}
        if self.indices is not None:
            out["indices"] = [self.indices[pol].to_dict() for pol in sorted(self.indices)]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeLog":
        indices = None
        if "indices" in data:
            results = [IndexResult.from_dict(d) for d in data["indices"]]
            indices = {res.policy: res for res in results}
        return cls(data["k"], data["start"], tuple(data["policy"]), TransitionCounts.from_dict(data["counts"]), indices)


class Agent:
    """Shared episodic bookkeeping; subclasses implement :meth:`choose_policy`."""

    kind = "agent"

    def __init__(self, num_states: int, num_actions: int, support_mask: np.ndarray, rewards: np.ndarray):
        self.num_states = num_states
        self.num_actions = num_actions
        self.support_mask = np.asarray(support_mask, dtype=bool)
        self.rewards = np.asarray(rewards, dtype=float)
        self.reset()

    def reset(self, rng: np.random.Generator | None = None) -> None:
        self.counts = TransitionCounts.empty(self.num_states, self.num_actions)
        self.policy: Policy | None = None
        self.episodes: list[EpisodeLog] = []
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def config(self) -> dict:
        return {"kind": self.kind}

    def choose_policy(self, k: int, t: int) -> tuple[Policy, dict | None]:
        raise NotImplementedError

    def action(self, x: int) -> int:
        return self.policy[x]

    def step(self, t: int, x: int, transition: tuple[int, int, int] | None = None) -> int:
        """Record the last transition, refresh the policy at episode starts, act."""
        if transition is not None:
            px, pu, py = transition
            if py != x:
                raise ClockError(f"transition ends in {py} but the current state is {x}")
            record_transition(self.counts, px, pu, py, self.support_mask)
        if t != self.counts.clock:
            raise ClockError(f"step called at t={t} but the agent clock is {self.counts.clock}")
        if EpisodeSchedule.is_start(t):
            k = EpisodeSchedule.episode_of(t)
            self.policy, indices = self.choose_policy(k, t)
            self.episodes.append(EpisodeLog(k, t, self.policy, self.counts.copy(), indices))
        return int(self.action(x))


class RBMLEAgent(Agent):
    """Reward-biased MLE index policy.

    At each episode start every deterministic policy gets the index
    ``max_theta alpha(tau_k) J(theta, pi) - sum n KL(p_hat, theta)`` and the
    largest index is played for the whole episode.
    """

    kind = "rbmle"

    def __init__(
        self,
        num_states: int,
        num_actions: int,
        support_mask: np.ndarray,
        rewards: np.ndarray,
        a: float,
        b: float = 3.0,
        optimizer: OptimizerConfig = OptimizerConfig(),
        warm_start: bool = True,
        enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
    ):
        self.schedule = BiasSchedule(a, b, num_states, num_actions)
        self.optimizer = optimizer
        self.warm_start = warm_start
        self.policies = enumerate_policies(num_states, num_actions, enumeration_cap)
        super().__init__(num_states, num_actions, support_mask, rewards)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "a": self.schedule.a,
            "b": self.schedule.b,
            "optimizer": self.optimizer.to_dict(),
            "warm_start": self.warm_start,
        }

    def choose_policy(self, k: int, t: int):
        warm = None
        if self.warm_start and self.episodes:
            warm = {pol: res.biased_model for pol, res in self.episodes[-1].indices.items()}
        table = compute_indices(
            self.policies, self.counts, self.schedule(t), self.support_mask, self.rewards, self.optimizer, warm
        )
        return select_policy(table), table


def _projected_estimate(counts: TransitionCounts, support_mask: np.ndarray, mix: float = 1e-6) -> np.ndarray:
    uniform = support_mask / support_mask.sum(axis=2, keepdims=True)
    p_hat = empirical_model(counts)
    theta = (1.0 - mix) * p_hat + mix * uniform
    unvisited = counts.visit_counts == 0
    theta[unvisited] = uniform[unvisited]
    return theta


def baseline_select(
    kind: str,
    counts: TransitionCounts | None = None,
    model: MdpModel | None = None,
    *,
    support_mask: np.ndarray | None = None,
    rewards: np.ndarray | None = None,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
) -> Policy:
    """Policy chosen by a comparison rule.

    ``ce-greedy`` is optimal for the empirical estimate projected into the
    support (unvisited rows uniform-on-support); ``epsilon-greedy`` replaces
    each state's greedy action by a uniform one with probability ``epsilon``;
    ``oracle`` needs the true ``model``; ``uniform-random`` draws every action
    uniformly.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    if kind == "oracle":
        if model is None:
            raise ValueError("the oracle baseline needs the ground-truth model")
        return optimal_policy(model, cap=enumeration_cap)[1][0]
    if support_mask is None or rewards is None:
        if model is None:
            raise ValueError("support_mask and rewards (or a model) are required")
        support_mask, rewards = model.support_mask, model.rewards
    n_x, n_u = rewards.shape
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "uniform-random":
        return tuple(int(a) for a in rng.integers(0, n_u, size=n_x))
    theta = _projected_estimate(counts, support_mask)
    estimate = MdpModel(theta, rewards, support_mask, 0.0)
    greedy = optimal_policy(estimate, cap=enumeration_cap)[1][0]
    if kind == "ce-greedy":
        return greedy
    flips = rng.random(n_x) < epsilon
    random_actions = rng.integers(0, n_u, size=n_x)
    return tuple(int(r) if f else int(g) for g, r, f in zip(greedy, random_actions, flips))


class BaselineAgent(Agent):
    """Certainty-equivalent, epsilon-greedy, oracle or uniform-random agent."""

    def __init__(
        self,
        kind: str,
        num_states: int,
        num_actions: int,
        support_mask: np.ndarray,
        rewards: np.ndarray,
        epsilon: float = 0.1,
        model: MdpModel | None = None,
    ):
        if kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {kind!r}")
        if kind == "oracle" and model is None:
            raise ValueError("the oracle baseline needs the ground-truth model")
        self.kind = kind
        self.epsilon = float(epsilon)
        self.model = model
        super().__init__(num_states, num_actions, support_mask, rewards)

    def config(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "epsilon-greedy":
            out["epsilon"] = self.epsilon
        return out

    def choose_policy(self, k: int, t: int):
        if self.kind == "oracle":
            return baseline_select("oracle", model=self.model), None
        if self.kind == "uniform-random":
            return tuple([0] * self.num_states), None
        return baseline_select("ce-greedy", self.counts, support_mask=self.support_mask, rewards=self.rewards), None

    def action(self, x: int) -> int:
        if self.kind == "uniform-random":
            return int(self.rng.integers(0, self.num_actions))
        if self.kind == "epsilon-greedy" and self.rng.random() < self.epsilon:
            return int(self.rng.integers(0, self.num_actions))
        return self.policy[x]


def make_agent(config: dict, model: MdpModel) -> Agent:
    """Build an agent from a configuration block (``kind`` plus parameters)."""
    kind = config.get("kind", "rbmle")
    if kind == "rbmle":
        if "a" not in config:
            raise ValueError("agent.a is required for the rbmle agent")
        opt = OptimizerConfig(**config.get("optimizer", {}))
        return RBMLEAgent(
            model.num_states,
            model.num_actions,
            model.support_mask,
            model.rewards,
            a=float(config["a"]),
            b=float(config.get("b", 3.0)),
            optimizer=opt,
            warm_start=bool(config.get("warm_start", True)),
        )
    return BaselineAgent(
        kind,
        model.num_states,
        model.num_actions,
        model.support_mask,
        model.rewards,
        epsilon=float(config.get("epsilon", 0.1)),
        model=model if kind == "oracle" else None,
    )
