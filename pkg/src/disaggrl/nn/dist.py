"""Diagonal Gaussian action distribution with a state-independent log-std."""

from __future__ import annotations

import math

import numpy as np

from .layers import ShapeError

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_logprob_entropy(mean, log_std, action) -> tuple[np.ndarray, np.ndarray]:
    """Per-row log-density of ``action`` and entropy, both summed over action dims."""
    mean = np.asarray(mean)
    action = np.asarray(action, dtype=mean.dtype)
    log_std = np.broadcast_to(np.asarray(log_std, dtype=mean.dtype), mean.shape)
    if action.shape != mean.shape:
        raise ShapeError(f"action shape {action.shape} != mean shape {mean.shape}")
    z = (action - mean) * np.exp(-log_std)
    logp = (-0.5 * z * z - log_std - HALF_LOG_2PI).sum(axis=-1)
    entropy = (log_std + 0.5 + HALF_LOG_2PI).sum(axis=-1)
    return logp, entropy


def logprob_grads(mean, log_std, action) -> tuple[np.ndarray, np.ndarray]:
    """d logp / d mean  [B,A] and d logp / d log_std  [B,A]."""
    inv_var = np.exp(-2.0 * np.asarray(log_std, dtype=mean.dtype))
    diff = action - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def sample(mean, log_std, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(mean.shape).astype(mean.dtype)
    return mean + np.exp(log_std).astype(mean.dtype) * noise
