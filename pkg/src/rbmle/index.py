"""Per-policy reward-biased indices.

For a deterministic policy ``pi`` the index is

    max_theta  alpha * J(theta, pi) - sum_{x,u} n(x,u) KL(p_hat(x,u), theta(x,u))

over kernels sharing the known support. Only the rows ``theta(x, pi(x))``
influence ``J``; every other row is pinned to the empirical estimate (or to
uniform-on-support when unvisited), which makes its penalty zero. The
controlled rows are optimized by multi-start exponentiated-gradient ascent
with a per-row step scale and Armijo backtracking, using the gain
sensitivity ``dJ / dtheta(x, y, pi(x)) = mu(x) h(y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .estimation import TransitionCounts, empirical_model
from .mdp import Policy, recurrent_classes


class OptimizerError(RuntimeError):
    def __init__(self, message: str, best: "IndexResult | None" = None):
        self.best = best
        super().__init__(message)


@dataclass(frozen=True)
class OptimizerConfig:
    restarts: int = 8
    max_iter: int = 5000
    rel_tol: float = 1e-10
    grad_tol: float = 1e-8
    floor: float = 1e-12
    interior_mix: float = 1e-6
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class IndexResult:
    policy: Policy
    biased_model: np.ndarray
    index_value: float
    gain: float
    penalty: float
    alpha: float
    iterations: int = 0
    grad_norm: float = 0.0
    restarts: int = 0
    converged: bool = True
    start_values: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "policy": list(self.policy),
            "biased_model": self.biased_model.tolist(),
            "index_value": self.index_value,
            "gain": self.gain,
            "penalty": self.penalty,
            "alpha": self.alpha,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "restarts": self.restarts,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IndexResult":
        return cls(
            policy=tuple(data["policy"]),
            biased_model=np.asarray(data["biased_model"], dtype=float),
            index_value=data["index_value"],
            gain=data["gain"],
            penalty=data["penalty"],
            alpha=data["alpha"],
            iterations=data["iterations"],
            grad_norm=data["grad_norm"],
            restarts=data["restarts"],
            converged=data["converged"],
        )


def _solve_chain(chain: np.ndarray, reward: np.ndarray):
    n = chain.shape[0]
    system = np.eye(n) - chain
    system[:, 0] = 1.0
    mu = np.linalg.solve(system.T, np.eye(n)[0])
    sol = np.linalg.solve(system, reward)
    bias = sol.copy()
    bias[0] = 0.0
    bias -= mu @ bias
    return float(sol[0]), mu, bias


def gain_gradient(chain: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """``dJ / dP(x, y) = mu(x) h(y)`` for a unichain transition matrix ``P``."""
    _, mu, bias = _solve_chain(chain, reward)
    return np.outer(mu, bias)


def _row_kl(p_hat: np.ndarray, rows: np.ndarray) -> np.ndarray:
    on = p_hat > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(on, p_hat * np.log(np.where(on, p_hat, 1.0) / np.where(on, rows, 1.0)), 0.0)
        terms = np.where(on & (rows <= 0), np.inf, terms)
    return terms.sum(axis=1)


def kl_penalty(theta: np.ndarray, counts: TransitionCounts) -> float:
    """``sum_{x,u} n(x,u) KL(p_hat(x,u), theta(x,u))`` over visited pairs."""
    p_hat = empirical_model(counts)
    n_x, n_u, _ = theta.shape
    kl = _row_kl(p_hat.reshape(n_x * n_u, -1), theta.reshape(n_x * n_u, -1))
    n = counts.visit_counts.reshape(-1).astype(float)
    visited = n > 0
    return float(np.sum(n[visited] * kl[visited]))


def pinned_model(counts: TransitionCounts, support_mask: np.ndarray) -> np.ndarray:
    """Empirical estimate with unvisited rows replaced by uniform-on-support."""
    theta = empirical_model(counts)
    uniform = support_mask / support_mask.sum(axis=2, keepdims=True)
    unvisited = counts.visit_counts == 0
    theta[unvisited] = uniform[unvisited]
    return theta


def best_cycle_kernel(support: np.ndarray, reward: np.ndarray) -> tuple[np.ndarray, float]:
    """Deterministic kernel maximizing the gain of a chain with row supports ``support``.

    Any kernel with the full support pattern keeps the same recurrent class,
    so the supremum of the gain is the best mean-reward cycle inside that
    class; every other state is routed towards the cycle.
    """
    n = support.shape[0]
    (recurrent,) = recurrent_classes(support.astype(float))
    members = set(int(v) for v in recurrent)
    graph = nx.DiGraph()
    graph.add_nodes_from(members)
    graph.add_edges_from((x, y) for x in members for y in members if support[x, y])
    best_cycle, best_mean = None, -math.inf
    for count, cycle in enumerate(nx.simple_cycles(graph)):
        mean = float(np.mean(reward[cycle]))
        if mean > best_mean + 1e-15:
            best_cycle, best_mean = cycle, mean
        if count >= 200_000:
            break
    successor = {}
    for i, x in enumerate(best_cycle):
        successor[x] = best_cycle[(i + 1) % len(best_cycle)]
    # reverse breadth-first search routes every other state to the cycle
    frontier = list(best_cycle)
    while frontier:
        nxt = []
        for y in frontier:
            for x in range(n):
                if x not in successor and support[x, y]:
                    successor[x] = y
                    nxt.append(x)
        frontier = nxt
    kernel = np.zeros((n, n))
    for x, y in successor.items():
        kernel[x, y] = 1.0
    return kernel, best_mean


class _Problem:
    """Objective over the controlled rows of one policy."""

    def __init__(self, p_hat, n, support, reward, alpha, floor):
        self.p_hat = p_hat
        self.n = n
        self.support = support
        self.reward = reward
        self.alpha = alpha
        self.floor = floor
        on = p_hat > 0
        # n KL(p_hat, theta) = n sum p_hat log p_hat - n sum p_hat log theta
        self.weights = n[:, None] * p_hat
        self.entropy_part = float(np.sum(self.weights[on] * np.log(p_hat[on])))
        self.on = on
        self.eye = np.eye(len(reward))

    def value(self, rows):
        system = self.eye - rows
        system[:, 0] = 1.0
        try:
            gain = float(np.linalg.solve(system, self.reward)[0])
        except np.linalg.LinAlgError:
            return -math.inf, None
        penalty = self.entropy_part - float(np.sum(self.weights[self.on] * np.log(rows[self.on])))
        return self.alpha * gain - penalty, (gain, penalty)

    def gradient(self, rows):
        _, mu, bias = _solve_chain(rows, self.reward)
        kl_grad = np.zeros_like(rows)
        kl_grad[self.on] = self.p_hat[self.on] / rows[self.on]
        grad = self.alpha * np.outer(mu, bias) + self.n[:, None] * kl_grad
        return np.where(self.support, grad, 0.0), mu, bias

    def project(self, rows):
        rows = np.where(self.support, np.maximum(rows, self.floor), 0.0)
        return rows / rows.sum(axis=1, keepdims=True)


def _ascend(problem: _Problem, rows: np.ndarray, cfg: OptimizerConfig):
    """Exponentiated-gradient ascent from ``rows``; returns (rows, value, parts, iters, stat, converged)."""
    rows = problem.project(rows)
    value, parts = problem.value(rows)
    if parts is None:
        return rows, value, parts, 0, math.inf, False
    step = 1.0
    stat = math.inf
    for it in range(1, cfg.max_iter + 1):
        grad, mu, bias = problem.gradient(rows)
        span = float(bias.max() - bias.min())
        scale = 1.0 / (problem.n + problem.alpha * mu * span + 1.0)
        centered = grad - np.sum(rows * grad, axis=1, keepdims=True)
        stat = float(np.max(scale[:, None] * rows * np.abs(np.where(problem.support, centered, 0.0))))
        if stat < cfg.grad_tol:
            return rows, value, parts, it, stat, True
        direction = scale[:, None] * centered
        log_rows = np.log(np.where(problem.support, rows, 1.0))
        accepted = False
        while step > 1e-20:
            logits = np.where(problem.support, log_rows + step * direction, -np.inf)
            logits -= logits.max(axis=1, keepdims=True)
            trial = problem.project(np.exp(logits))
            trial_value, trial_parts = problem.value(trial)
            ascent = float(np.sum(grad * (trial - rows)))
            if trial_parts is not None and trial_value >= value + 1e-4 * ascent:
                accepted = True
                break
            step *= 0.5
        if not accepted:  # no representable ascent step left
            return rows, value, parts, it, stat, stat < math.sqrt(cfg.grad_tol)
        change = abs(trial_value - value) / max(1.0, abs(value))
        rows, value, parts = trial, trial_value, trial_parts
        step = min(step * 2.0, 1e6)
        if change < cfg.rel_tol:
            return rows, value, parts, it, stat, True
    return rows, value, parts, cfg.max_iter, stat, False


def optimize_biased_model(
    policy: Sequence[int],
    counts: TransitionCounts,
    alpha_value: float,
    support_mask: np.ndarray,
    rewards: np.ndarray,
    config: OptimizerConfig = OptimizerConfig(),
    extra_starts: Iterable[np.ndarray] = (),
) -> IndexResult:
    """Maximize the reward-biased, KL-penalized objective for one policy.

    ``extra_starts`` are full ``(X, U, X)`` kernels (e.g. last episode's
    maximizer) whose controlled rows join the multi-start set.
    """
    if alpha_value < 0:
        raise ValueError("alpha_value must be non-negative")
    policy = tuple(int(a) for a in policy)
    n_x = counts.num_states
    states = np.arange(n_x)
    act = np.asarray(policy)
    p_hat_all = empirical_model(counts)
    base = pinned_model(counts, support_mask)

    p_hat = p_hat_all[states, act]
    n = counts.visit_counts[states, act].astype(float)
    support = support_mask[states, act]
    reward = rewards[states, act]
    problem = _Problem(p_hat, n, support, reward, float(alpha_value), config.floor)

    uniform = support / support.sum(axis=1, keepdims=True)
    mix = config.interior_mix
    starts = [(1 - mix) * base[states, act] + mix * uniform]
    vertex, _ = best_cycle_kernel(support, reward)
    starts.append((1 - mix) * vertex + mix * uniform)
    starts.append(uniform)
    starts.extend(np.asarray(k, dtype=float)[states, act] for k in extra_starts)
    rng = np.random.default_rng([config.seed, *policy])
    while len(starts) < max(config.restarts, 3):
        draw = rng.gamma(1.0, size=support.shape) * support
        starts.append(draw / draw.sum(axis=1, keepdims=True))

    best = None
    values = []
    total_iters = 0
    any_converged = False
    for start in starts:
        rows, value, parts, iters, stat, converged = _ascend(problem, start, config)
        total_iters += iters
        values.append(value)
        if parts is None:
            continue
        any_converged = any_converged or converged
        if best is None or value > best[1]:
            best = (rows, value, parts, stat, converged)
    if best is None:
        raise OptimizerError(f"no start produced a finite objective for policy {policy}")
    rows, value, parts, stat, converged = best
    theta = base.copy()
    theta[states, act] = rows
    result = IndexResult(
        policy=policy,
        biased_model=theta,
        index_value=float(value),
        gain=parts[0],
        penalty=parts[1],
        alpha=float(alpha_value),
        iterations=total_iters,
        grad_norm=stat,
        restarts=len(starts),
        converged=converged,
        start_values=values,
    )
    if not any_converged:
        raise OptimizerError(f"no start converged for policy {policy} (stationarity {stat:.2e})", result)
    return result


def compute_indices(
    policies: Sequence[Policy],
    counts: TransitionCounts,
    alpha_value: float,
    support_mask: np.ndarray,
    rewards: np.ndarray,
    config: OptimizerConfig = OptimizerConfig(),
    warm_starts: dict[Policy, np.ndarray] | None = None,
) -> dict[Policy, IndexResult]:
    """Index of every policy against one frozen counts snapshot."""
    warm_starts = warm_starts or {}
    table = {}
    for pol in policies:
        extra = [warm_starts[pol]] if pol in warm_starts else []
        table[pol] = optimize_biased_model(pol, counts, alpha_value, support_mask, rewards, config, extra)
    return table


def select_policy(table: dict[Policy, IndexResult]) -> Policy:
    """Largest index; exact ties go to the lexicographically smallest policy."""
    if not table:
        raise ValueError("empty index table")
    best_policy, best_value = None, -math.inf
    for pol in sorted(table):
        value = table[pol].index_value
        if value > best_value:
            best_policy, best_value = pol, value
    return best_policy
