"""Adam with bias correction, operating in place on named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skip_nonfinite: bool = False
    skipped: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Update ``params`` in place; returns ``(params, state)``.

    A non-finite gradient raises :class:`OptError` unless ``state.skip_nonfinite``
    is set, in which case the step is dropped and counted.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        if state.skip_nonfinite:
            state.skipped += 1
            return params, state
        raise OptError("non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: grad shape {g.shape} != param shape {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / (total + 1e-6))
        for g in grads.values():
            g *= scale
    return total
