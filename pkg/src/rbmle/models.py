"""Reference models and the random model generator."""
from __future__ import annotations

import json
import os

import numpy as np

from .mdp import MdpModel, validate_mdp

TO_0, TO_1 = (0.9, 0.1), (0.1, 0.9)


def reference_model() -> MdpModel:
    """Two states, two actions, rows in {(0.9, 0.1), (0.1, 0.9)}, p_min = 0.1.

    State 1 pays 0.7 whatever the action; state 0 pays 0.3 for moving on
    (action 0) and 0.05 for staying. Policy (0, 1) -- leave state 0, then
    stay in state 1 -- is the unique optimum with gain 0.66; the runner-up
    (0, 0) earns 0.5, so the smallest gap is 0.16.
    """
    transitions = [
        [TO_1, TO_0],
        [TO_0, TO_1],
    ]
    rewards = [[0.3, 0.05], [0.7, 0.7]]
    return validate_mdp(transitions, rewards, p_min=0.1)


def deceptive_model() -> MdpModel:
    """Two-state model that traps certainty-equivalent control.

    State 0 is the rich state (reward 1, left with probability 0.5). In
    state 1 the tempting action 1 pays 0.5 but keeps the chain in state 1,
    while action 0 pays 0.05 and returns to state 0 with probability 0.9.
    Policy (0, 0) is optimal (gain ~0.661, gap ~0.077 to (0, 1)). With the
    unvisited row of action 0 treated as uniform, the greedy estimate
    values (0, 0) at only 0.525, below the learned 0.583 of (0, 1), so the
    optimal action is never tried once action 1's row has been learned.
    """
    transitions = [
        [(0.5, 0.5), TO_1],
        [TO_0, TO_1],
    ]
    rewards = [[1.0, 0.05], [0.05, 0.5]]
    return validate_mdp(transitions, rewards, p_min=0.1)


def random_model(num_states: int, num_actions: int, p_min: float = 0.05, seed: int = 0) -> MdpModel:
    """Dense random kernel floored at ``p_min`` and rewards in ``[0.05, 1]``.

    Every entry is positive, so every policy induces an irreducible chain.
    """
    if not 0 < p_min * num_states <= 1:
        raise ValueError("p_min * num_states must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    raw = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    kernel = p_min + (1.0 - num_states * p_min) * raw
    kernel /= kernel.sum(axis=2, keepdims=True)
    rewards = rng.uniform(0.05, 1.0, size=(num_states, num_actions))
    return validate_mdp(kernel, rewards, p_min=float(kernel.min()))


BUILTIN_MODELS = {"reference": reference_model, "deceptive": deceptive_model}


def load_mdp(path: str | os.PathLike) -> MdpModel:
    """Read a JSON model (``transitions[x][u][y]``, ``rewards[x][u]``, optional
    ``support_mask`` and ``p_min``) and validate it."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return MdpModel.from_dict(data)
