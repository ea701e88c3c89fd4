"""Brute-force reference computations shared by the test modules."""
import numpy as np

from rbmle.estimation import empirical_model


def grid_index(policy, counts, alpha, rewards, step=1e-3):
    """Index of ``policy`` on a two-state, full-support model by exhaustive grid search.

    Each controlled row is ``(q, 1 - q)``; the gain of the two-state chain is
    ``mu0 r0 + (1 - mu0) r1`` with ``mu0 = q1 / (1 - q0 + q1)``.
    """
    act = np.asarray(policy)
    states = np.arange(2)
    p_hat = empirical_model(counts)[states, act]
    n = counts.visit_counts[states, act].astype(float)
    r = rewards[states, act]
    q = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)  # vertices included
    q0, q1 = q[:, None], q[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = q1 / (1.0 - q0 + q1)  # 0/0 only for the two-absorbing-states corner
        gain = mu0 * r[0] + (1.0 - mu0) * r[1]

        def kl(p, qq):
            out = np.zeros_like(qq)
            if p[0] > 0:
                out = out + p[0] * np.log(p[0] / qq)
            if p[1] > 0:
                out = out + p[1] * np.log(p[1] / (1.0 - qq))
            return out

        value = alpha * gain - n[0] * kl(p_hat[0], q0) - n[1] * kl(p_hat[1], q1)
    value = np.where(np.isnan(value), -np.inf, value)
    i, j = np.unravel_index(np.argmax(value), value.shape)
    return float(value[i, j]), (float(q[i]), float(q[j]))
