from __future__ import annotations

import numpy as np


def compute_gae(rewards, values, dones, bootstrap_values, gamma: float, lam: float, dtype=np.float32):
    """Generalized advantage estimates and value targets for an ``H x N`` block.

    ``dones[t]`` cuts both the bootstrap and the advantage recursion after step t.
    Accumulates in float64; the results are cast to ``dtype``.
    """
    rewards = np.asarray(rewards, np.float64)
    values = np.asarray(values, np.float64)
    notdone = 1.0 - np.asarray(dones, np.float64)
    H = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_values, np.float64)
    next_adv = np.zeros_like(next_value)
    for t in reversed(range(H)):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        next_adv = delta + gamma * lam * notdone[t] * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv.astype(dtype), (adv + values).astype(dtype)


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    a = adv.astype(np.float64)
    return ((a - a.mean()) / (a.std() + eps)).astype(np.float32)
