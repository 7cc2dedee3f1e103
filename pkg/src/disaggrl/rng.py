"""Counter-based random draws keyed by (seed, env_id, episode, draw_index).

Every draw is a pure function of its key, so the values an environment sees do
not depend on which process steps it or how many siblings share its batch.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(k) for k in (30, 27, 31, 11))
_INV53 = 1.0 / (1 << 53)


def splitmix64(x) -> np.ndarray:
    """Finalizer of the splitmix64 generator, applied elementwise (mod 2**64)."""
    z = np.array(x, dtype=np.uint64, ndmin=1) + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def key_hash(seed, env_ids, episodes, draws) -> np.ndarray:
    """Chain the four key components through splitmix64; broadcasts."""
    h = splitmix64(np.asarray(seed, dtype=np.uint64))
    h = splitmix64(h ^ np.asarray(env_ids, dtype=np.uint64))
    h = splitmix64(h ^ np.asarray(episodes, dtype=np.uint64))
    return splitmix64(h ^ np.asarray(draws, dtype=np.uint64))


def uniform(seed, env_ids, episodes, draws) -> np.ndarray:
    """Float64 uniforms in [0, 1) with 53 random bits."""
    return (key_hash(seed, env_ids, episodes, draws) >> _S11).astype(np.float64) * _INV53


def normal_pair(seed, env_ids, episodes, draw) -> tuple[np.ndarray, np.ndarray]:
    """Two independent standard normals per key via Box-Muller.

    Draws ``draw`` and ``draw + 1`` are consumed.  The transcendental part runs
    through ``math`` one element at a time: numpy's SIMD kernels may round the
    tail of an array differently from its body, which would make results depend
    on batch size.
    """
    u1 = uniform(seed, env_ids, episodes, draw)
    u2 = uniform(seed, env_ids, episodes, np.asarray(draw, dtype=np.uint64) + np.uint64(1))
    z0 = np.empty(u1.shape)
    z1 = np.empty(u1.shape)
    for i, (a, b) in enumerate(zip(u1.tolist(), u2.tolist())):
        r = math.sqrt(-2.0 * math.log(1.0 - a))
        z0[i] = r * math.cos(2.0 * math.pi * b)
        z1[i] = r * math.sin(2.0 * math.pi * b)
    return z0, z1
