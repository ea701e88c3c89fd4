"""Finite average-reward MDPs: validation, policy evaluation, solvers, and
the structural constants (mixing time, conductivity, gaps) used by the
regret analysis.

Transition kernels are stored as arrays of shape ``(X, U, X)`` so that
``kernel[x, u]`` is the next-state distribution of the pair ``(x, u)``.
Deterministic policies are tuples of action indices, one per state.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ROW_SUM_TOL = 1e-9
DEFAULT_ENUMERATION_CAP = 4096
OPTIMALITY_TOL = 1e-10


class MdpError(Exception):
    """Base class for MDP solver errors."""


class InvalidModelError(MdpError):
    """Raised by :func:`validate_mdp`; carries every violated invariant."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MultichainError(MdpError):
    pass


class MultichainModelError(InvalidModelError, MultichainError):
    """A model rejected because some policy induces several recurrent classes."""


class EnumerationCapError(MdpError):
    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"{count} deterministic policies exceed the enumeration cap of {cap}")


class UndefinedGapError(MdpError):
    pass


class ConvergenceError(MdpError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


Policy = tuple[int, ...]


@dataclass(frozen=True)
class MdpModel:
    """Validated ground-truth MDP.

    ``transitions[x, u, y]`` is ``p(x, y, u)``; ``rewards[x, u]`` is ``r(x, u)``.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    support_mask: np.ndarray
    p_min: float

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "support_mask": self.support_mask.tolist(),
            "p_min": self.p_min,
        }

    @classmethod
    def from_dict(cls, data: dict, enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> "MdpModel":
        return validate_mdp(
            data["transitions"],
            data["rewards"],
            support_mask=data.get("support_mask"),
            p_min=data.get("p_min"),
            num_states=data.get("num_states"),
            num_actions=data.get("num_actions"),
            enumeration_cap=enumeration_cap,
        )


@dataclass(frozen=True)
class PolicyEvaluation:
    gain: float
    stationary: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class ErgodicConstants:
    mixing_time: float
    conductivity: float
    conductivity_policy: Policy | None
    gaps: dict[Policy, float]
    gap_min: float
    optimal_gain: float
    optimal_policies: list[Policy] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Policies and induced chains


def policy_count(num_states: int, num_actions: int) -> int:
    return num_actions**num_states


def enumerate_policies(num_states: int, num_actions: int, cap: int = DEFAULT_ENUMERATION_CAP) -> list[Policy]:
    """All deterministic policies in lexicographic order.

    The order doubles as the tie-breaking priority everywhere in the package.
    """
    count = policy_count(num_states, num_actions)
    if count > cap:
        raise EnumerationCapError(count, cap)
    return list(itertools.product(range(num_actions), repeat=num_states))


def _as_policy_matrix(policy, num_states: int, num_actions: int) -> np.ndarray:
    arr = np.asarray(policy)
    if arr.ndim == 1:
        if arr.shape != (num_states,):
            raise ValueError(f"policy must have {num_states} entries, got {arr.shape[0]}")
        if arr.dtype.kind not in "iu" or np.any(arr < 0) or np.any(arr >= num_actions):
            raise ValueError("policy actions out of range")
        mat = np.zeros((num_states, num_actions))
        mat[np.arange(num_states), arr] = 1.0
        return mat
    if arr.shape != (num_states, num_actions):
        raise ValueError(f"randomized policy must have shape {(num_states, num_actions)}")
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise ValueError("randomized policy rows must be distributions")
    return arr.astype(float)


def induced_chain(kernel: np.ndarray, policy) -> np.ndarray:
    """Transition matrix of the chain induced by a (possibly randomized) policy."""
    num_states, num_actions, _ = kernel.shape
    arr = np.asarray(policy)
    if arr.ndim == 1:
        return kernel[np.arange(num_states), arr.astype(int)]
    weights = _as_policy_matrix(policy, num_states, num_actions)
    return np.einsum("xu,xuy->xy", weights, kernel)


def induced_rewards(rewards: np.ndarray, policy) -> np.ndarray:
    arr = np.asarray(policy)
    if arr.ndim == 1:
        return rewards[np.arange(rewards.shape[0]), arr.astype(int)]
    return np.einsum("xu,xu->x", arr, rewards)


def recurrent_classes(chain: np.ndarray) -> list[np.ndarray]:
    """Closed communicating classes of a Markov chain."""
    n_comp, labels = connected_components(csr_matrix(chain > 0), directed=True, connection="strong")
    classes = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        outside = np.ones(chain.shape[0], dtype=bool)
        outside[members] = False
        if not np.any(chain[np.ix_(members, outside)] > 0):
            classes.append(members)
    return classes


def is_unichain(chain: np.ndarray) -> bool:
    return len(recurrent_classes(chain)) == 1


# ---------------------------------------------------------------------------
# Validation


def validate_mdp(
    transitions,
    rewards,
    support_mask=None,
    p_min: float | None = None,
    *,
    num_states: int | None = None,
    num_actions: int | None = None,
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
    sample_size: int = 512,
    seed: int = 0,
) -> MdpModel:
    """Check every model invariant and build an :class:`MdpModel`.

    ``transitions`` is indexed ``[x][u][y]``. All violations are collected and
    raised together as :class:`InvalidModelError`. The unichain check is exact
    when the number of deterministic policies is within ``enumeration_cap``;
    otherwise ``sample_size`` policies are drawn with a seeded generator.
    """
    kernel = np.asarray(transitions, dtype=float)
    reward = np.asarray(rewards, dtype=float)
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[2]:
        raise InvalidModelError([f"transitions must have shape (X, U, X), got {kernel.shape}"])
    n_x, n_u, _ = kernel.shape
    if reward.shape != (n_x, n_u):
        raise InvalidModelError([f"rewards must have shape {(n_x, n_u)}, got {reward.shape}"])
    violations = []
    if num_states is not None and num_states != n_x:
        violations.append(f"num_states={num_states} does not match transitions ({n_x})")
    if num_actions is not None and num_actions != n_u:
        violations.append(f"num_actions={num_actions} does not match transitions ({n_u})")
    if not np.all(np.isfinite(kernel)) or np.any(kernel < 0) or np.any(kernel > 1):
        violations.append("transition entries must lie in [0, 1]")
    sums = kernel.sum(axis=2)
    for x, u in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)):
        violations.append(f"row (x={x}, u={u}) sums to {sums[x, u]:.12g}, not 1")
    bad = np.argwhere(~((reward > 0) & (reward <= 1)))
    for x, u in bad:
        violations.append(f"reward r({x},{u})={reward[x, u]!r} outside (0, 1]")

    if support_mask is None:
        mask = kernel > 0
    else:
        mask = np.asarray(support_mask, dtype=bool)
        if mask.shape != kernel.shape:
            violations.append(f"support_mask shape {mask.shape} does not match transitions")
            mask = kernel > 0
        elif np.any(kernel[~mask] != 0):
            violations.append("transitions are non-zero outside the support mask")
    if not np.all(mask.any(axis=2)):
        violations.append("every (x, u) needs at least one supported successor")
    positive = kernel[mask]
    observed_min = float(positive.min()) if positive.size else 0.0
    if p_min is None:
        p_min = observed_min
    else:
        p_min = float(p_min)
        if not 0 < p_min <= 1:
            violations.append(f"p_min={p_min} outside (0, 1]")
        elif positive.size and observed_min < p_min - 1e-12:
            violations.append(f"supported transition {observed_min:.6g} below p_min={p_min:.6g}")
    if violations:
        raise InvalidModelError(violations)

    if policy_count(n_x, n_u) <= enumeration_cap:
        candidates = enumerate_policies(n_x, n_u, enumeration_cap)
    else:
        rng = np.random.default_rng(seed)
        candidates = [tuple(int(a) for a in rng.integers(0, n_u, size=n_x)) for _ in range(sample_size)]
    for pol in candidates:
        if not is_unichain(induced_chain(kernel, pol)):
            raise MultichainModelError([f"multichain: policy {pol} induces more than one recurrent class"])
    return MdpModel(kernel, reward, mask, p_min)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_chain(chain: np.ndarray, reward: np.ndarray) -> PolicyEvaluation:
    """Gain, stationary distribution and bias of a unichain Markov reward process.

    Solves ``J 1 + (I - P) h = r`` with ``mu . h = 0`` through the bordered
    matrix ``I - P`` whose first column is replaced by ones.
    """
    n = chain.shape[0]
    system = np.eye(n) - chain
    system[:, 0] = 1.0
    try:
        mu = np.linalg.solve(system.T, np.eye(n)[0])
        sol = np.linalg.solve(system, reward)
    except np.linalg.LinAlgError as exc:
        raise MultichainError("evaluation system is singular; the induced chain is multichain") from exc
    if np.linalg.cond(system) > 1e14:
        raise MultichainError("evaluation system is numerically singular; the induced chain is multichain")
    gain = float(sol[0])
    bias = sol.copy()
    bias[0] = 0.0
    bias -= mu @ bias
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    return PolicyEvaluation(gain, mu, bias)


def evaluate_policy(model: MdpModel, policy: Sequence[int], theta: np.ndarray | None = None) -> PolicyEvaluation:
    """Evaluate a deterministic policy under ``model`` or under a kernel ``theta``."""
    kernel = model.transitions if theta is None else np.asarray(theta, dtype=float)
    pol = np.asarray(policy)
    if pol.ndim != 1:
        raise ValueError("evaluate_policy requires a deterministic policy")
    _as_policy_matrix(pol, model.num_states, model.num_actions)
    return evaluate_chain(induced_chain(kernel, pol), induced_rewards(model.rewards, pol))


def gain(model: MdpModel, policy: Sequence[int], theta: np.ndarray | None = None) -> float:
    return evaluate_policy(model, policy, theta).gain


# ---------------------------------------------------------------------------
# Optimal control


def _howard(kernel: np.ndarray, rewards: np.ndarray, max_iter: int = 1000) -> Policy:
    n_x = kernel.shape[0]
    policy = np.zeros(n_x, dtype=int)
    seen = set()
    for _ in range(max_iter):
        ev = evaluate_chain(induced_chain(kernel, policy), induced_rewards(rewards, policy))
        q = rewards + kernel @ ev.bias
        current = q[np.arange(n_x), policy]
        best = q.max(axis=1)
        improve = best > current + 1e-12 * max(1.0, float(np.abs(q).max()))
        if not improve.any():
            return tuple(int(a) for a in policy)
        key = tuple(policy)
        if key in seen:
            break
        seen.add(key)
        new = policy.copy()
        new[improve] = np.argmax(q[improve], axis=1)
        policy = new
    raise MdpError("policy iteration cycled")


def policy_iteration(model: MdpModel, theta: np.ndarray | None = None) -> tuple[float, Policy]:
    """Gain and policy reached by Howard policy iteration from the all-zeros policy."""
    kernel = model.transitions if theta is None else np.asarray(theta, dtype=float)
    pol = _howard(kernel, model.rewards)
    return evaluate_policy(model, pol, kernel).gain, pol


def optimal_policy(
    model: MdpModel,
    theta: np.ndarray | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
    tol: float = OPTIMALITY_TOL,
) -> tuple[float, list[Policy]]:
    """Optimal gain and the optimal deterministic policies in priority order.

    Howard policy iteration finds a maximizer; when the policy space is within
    ``cap`` the full optimal set is confirmed by enumeration. Above the cap the
    returned set holds only the policy-iteration result.
    """
    kernel = model.transitions if theta is None else np.asarray(theta, dtype=float)
    try:
        pi_star = _howard(kernel, model.rewards)
    except MdpError:
        pi_star = None
    if policy_count(model.num_states, model.num_actions) > cap:
        if pi_star is None:
            raise MdpError("policy iteration cycled and enumeration exceeds the cap")
        return evaluate_policy(model, pi_star, kernel).gain, [pi_star]
    policies = enumerate_policies(model.num_states, model.num_actions, cap)
    gains = np.array([evaluate_policy(model, pol, kernel).gain for pol in policies])
    best = float(gains.max())
    if pi_star is not None:
        best = max(best, evaluate_policy(model, pi_star, kernel).gain)
    optimal = [pol for pol, g in zip(policies, gains) if g >= best - tol * max(1.0, abs(best))]
    return best, optimal


def policy_gains(model: MdpModel, cap: int = DEFAULT_ENUMERATION_CAP) -> dict[Policy, float]:
    return {pol: evaluate_policy(model, pol).gain for pol in enumerate_policies(model.num_states, model.num_actions, cap)}


def gaps(model: MdpModel, cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[dict[Policy, float], float]:
    """Per-policy optimality gaps and the smallest non-zero gap."""
    gains = policy_gains(model, cap)
    best, optimal = optimal_policy(model, cap=cap)
    optimal_set = set(optimal)
    per_policy = {pol: (0.0 if pol in optimal_set else best - g) for pol, g in gains.items()}
    suboptimal = [d for pol, d in per_policy.items() if pol not in optimal_set]
    if not suboptimal:
        raise UndefinedGapError("gap_min undefined: every deterministic policy is optimal")
    return per_policy, float(min(suboptimal))


# ---------------------------------------------------------------------------
# Hitting times and structural constants


def hitting_times_to(chain: np.ndarray, target: int) -> np.ndarray:
    """Expected hitting times of ``target`` from every state.

    The entry at ``target`` is the expected return time (first return, >= 1).
    """
    n = chain.shape[0]
    others = np.array([z for z in range(n) if z != target], dtype=int)
    times = np.zeros(n)
    if others.size:
        sub = np.eye(others.size) - chain[np.ix_(others, others)]
        try:
            times[others] = np.linalg.solve(sub, np.ones(others.size))
        except np.linalg.LinAlgError as exc:
            raise MultichainError(f"state {target} is not reachable from every state") from exc
        if not np.all(np.isfinite(times)) or np.any(times[others] < 1 - 1e-9):
            raise MultichainError(f"state {target} is not reachable from every state")
    times[target] = 1.0 + chain[target] @ times
    return times


def expected_hitting_time(model: MdpModel, policy, x: int, y: int, theta: np.ndarray | None = None) -> float:
    """Expected time for the chain induced by ``policy`` to hit ``y`` from ``x``.

    ``policy`` may be a tuple of actions or an ``(X, U)`` array of action
    probabilities. For ``x == y`` the expected return time is returned.
    """
    kernel = model.transitions if theta is None else np.asarray(theta, dtype=float)
    for s in (x, y):
        if not 0 <= s < model.num_states:
            raise ValueError(f"state {s} out of range")
    weights = _as_policy_matrix(policy, model.num_states, model.num_actions)
    chain = np.einsum("xu,xuy->xy", weights, kernel)
    return float(hitting_times_to(chain, y)[x])


def _max_hitting_times(kernel: np.ndarray, target: int, tol: float, max_iter: int) -> np.ndarray:
    """Largest expected hitting times of ``target`` over all stationary policies.

    Value iteration on the auxiliary "delay the visit" MDP, finished by exact
    policy-improvement rounds on the greedy policy.
    """
    n_x = kernel.shape[0]
    masked = kernel.copy()
    masked[:, :, target] = 0.0
    values = np.zeros(n_x)
    residual = np.inf
    for _ in range(max_iter):
        new = 1.0 + (masked @ values).max(axis=1)
        residual = float(np.max(np.abs(new - values)))
        values = new
        if residual <= tol * max(1.0, float(values.max())):
            break
    else:
        raise ConvergenceError(f"mixing-time value iteration for target {target} did not converge", residual)
    policy = tuple(int(a) for a in np.argmax(masked @ values, axis=1))
    for _ in range(100):
        exact = hitting_times_to(induced_chain(kernel, policy), target)
        exact_masked = exact.copy()
        exact_masked[target] = 0.0
        q = 1.0 + masked @ exact_masked
        current = q[np.arange(n_x), policy]
        improve = q.max(axis=1) > current + 1e-12 * max(1.0, float(q.max()))
        if not improve.any():
            return exact
        new = np.array(policy)
        new[improve] = np.argmax(q[improve], axis=1)
        policy = tuple(int(a) for a in new)
    return exact


def mixing_time(model: MdpModel, tol: float = 1e-12, max_iter: int = 1_000_000) -> float:
    """Worst expected hitting time over stationary policies and state pairs."""
    kernel = model.transitions
    return float(max(_max_hitting_times(kernel, y, tol, max_iter).max() for y in range(model.num_states)))


def conductivity(model: MdpModel, cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[float, Policy | None]:
    """Deterministic-policy conductivity and the policy attaining it.

    Maximizes ``max_{y != x} E[tau_xy] / (2 E[tau_xx])`` over deterministic
    policies and start states. A single-state model has no ``y != x`` and
    returns ``(0.0, None)``.
    """
    n_x = model.num_states
    if n_x == 1:
        return 0.0, None
    best, best_policy = -np.inf, None
    for pol in enumerate_policies(n_x, model.num_actions, cap):
        chain = induced_chain(model.transitions, pol)
        times = np.column_stack([hitting_times_to(chain, y) for y in range(n_x)])
        returns = np.diag(times).copy()
        off = times.copy()
        np.fill_diagonal(off, -np.inf)
        ratio = float(np.max(off.max(axis=1) / (2.0 * returns)))
        if ratio > best:
            best, best_policy = ratio, pol
    return best, best_policy


def ergodic_constants(model: MdpModel, cap: int = DEFAULT_ENUMERATION_CAP) -> ErgodicConstants:
    per_policy, gap_min = gaps(model, cap)
    best, optimal = optimal_policy(model, cap=cap)
    kappa, kappa_policy = conductivity(model, cap)
    return ErgodicConstants(
        mixing_time=mixing_time(model),
        conductivity=kappa,
        conductivity_policy=kappa_policy,
        gaps=per_policy,
        gap_min=gap_min,
        optimal_gain=best,
        optimal_policies=optimal,
    )
