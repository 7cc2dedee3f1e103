"""Greedy policy evaluation at a fixed curriculum fraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .env import EnvConfig, VecEnv
from .nn import PolicyNet

EVAL_ENV_ID_BASE = 1 << 40  # keeps evaluation episodes disjoint from training env ids


@dataclass
class EvalResult:
    successes: int
    episodes: int
    fraction: float
    low: float
    high: float
    mean_length: float

    @property
    def sr(self) -> float:
        return self.successes / self.episodes

    def to_dict(self) -> dict:
        return {
            "sr": self.sr,
            "successes": self.successes,
            "episodes": self.episodes,
            "adr_fraction": self.fraction,
            "ci95": [self.low, self.high],
            "mean_length": self.mean_length,
        }


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(successes, n).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def run_episodes(act, env_cfg: EnvConfig, episodes: int, fraction: float, seed: int, id_base: int = EVAL_ENV_ID_BASE):
    """Run the first episode of ``episodes`` envs under ``act(obs) -> actions``.

    Returns (success flags, episode lengths).
    """
    adr = env_cfg.make_adr()
    adr.set_fraction(fraction)
    env = VecEnv(env_cfg, np.arange(episodes, dtype=np.uint64) + np.uint64(id_base), seed, adr)
    obs = env.reset()
    finished = np.zeros(episodes, bool)
    success = np.zeros(episodes, bool)
    length = np.zeros(episodes, np.int64)
    for t in range(env_cfg.t_max):
        _, done, ok, obs = env.step(act(obs, done_mask=finished))
        new = done & ~finished
        success[new] = ok[new]
        length[new] = t + 1
        finished |= done
        if finished.all():
            break
    return success, length


class GreedyActor:
    """Deterministic ``act`` callable for a network (mean action, recurrent state kept)."""

    def __init__(self, net: PolicyNet, num_envs: int):
        self.net = net
        self.hidden = net.initial_hidden(num_envs)

    def __call__(self, obs, done_mask=None):
        main, proprio = self.net.inputs_from_obs(obs)
        recurrent = self.net.cfg.recurrent
        mean, _, _, _, hidden = self.net.forward(main, proprio, self.hidden if recurrent else None)
        if recurrent:
            self.hidden = hidden
        return mean.astype(np.float32)


def evaluate_net(net: PolicyNet, env_cfg: EnvConfig, episodes: int = 200, fraction: float = 0.0, seed: int = 0) -> EvalResult:
    """Greedy success rate over ``episodes`` episodes with a 95% Wilson interval."""
    if net.cfg.obs_key not in env_cfg.obs_modes:
        env_cfg = EnvConfig.from_dict({**env_cfg.to_dict(), "obs_modes": [net.cfg.obs_key]})
    actor = GreedyActor(net, episodes)
    success, length = run_episodes(actor, env_cfg, episodes, fraction, seed)
    k = int(success.sum())
    lo, hi = wilson_interval(k, episodes)
    return EvalResult(k, episodes, fraction, lo, hi, float(length.mean()))
