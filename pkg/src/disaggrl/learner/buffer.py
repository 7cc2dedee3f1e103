"""Learner-side experience storage and the lockstep rollout loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..nn import PolicyNet, gaussian_logprob_entropy, sample


@dataclass
class ExperienceBuffer:
    """``H x N`` rollout block. Lives only in the learner process."""

    main: np.ndarray  # [H, N, C, Hi, Wi] images or [H, N, D] state vectors
    proprio: np.ndarray  # [H, N, P]
    actions: np.ndarray  # [H, N, A]
    log_probs: np.ndarray  # [H, N]
    values: np.ndarray  # [H, N]
    rewards: np.ndarray  # [H, N]
    dones: np.ndarray  # [H, N] bool
    successes: np.ndarray  # [H, N] bool
    bootstrap_values: np.ndarray  # [N]
    init_hidden: np.ndarray  # [N, hidden]

    @classmethod
    def allocate(cls, horizon: int, num_envs: int, main_shape, proprio_dim: int, action_dim: int, hidden: int):
        H, N = horizon, num_envs
        f32 = np.float32
        return cls(
            main=np.zeros((H, N, *main_shape), f32),
            proprio=np.zeros((H, N, proprio_dim), f32),
            actions=np.zeros((H, N, action_dim), f32),
            log_probs=np.zeros((H, N), f32),
            values=np.zeros((H, N), f32),
            rewards=np.zeros((H, N), f32),
            dones=np.zeros((H, N), bool),
            successes=np.zeros((H, N), bool),
            bootstrap_values=np.zeros(N, f32),
            init_hidden=np.zeros((N, hidden), f32),
        )

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_envs(self) -> int:
        return self.rewards.shape[1]

    @property
    def image_bytes(self) -> int:
        return int(self.main.nbytes)

    @property
    def total_bytes(self) -> int:
        return int(sum(getattr(self, f).nbytes for f in self.__dataclass_fields__))

    def resets(self) -> np.ndarray:
        """Per-step flags: recurrent state is zeroed before step t if the env finished at t-1."""
        r = np.zeros_like(self.dones)
        r[1:] = self.dones[:-1]
        return r

    def episode_results(self) -> np.ndarray:
        """Success flags of every episode that finished in this rollout, time-major."""
        return self.successes[self.dones]

    def fields(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def equals(self, other: "ExperienceBuffer") -> bool:
        a, b = self.fields(), other.fields()
        return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


@dataclass
class RolloutState:
    """What persists between rollouts: the latest obs, recurrent state, sampling RNG."""

    obs: dict[str, np.ndarray]
    hidden: np.ndarray
    rng: np.random.Generator
    env_steps: int = 0
    timings: dict[str, float] = field(default_factory=lambda: {"inference": 0.0, "env": 0.0, "wire": 0.0})


def policy_act(net: PolicyNet, obs, hidden, rng: np.random.Generator | None, greedy: bool = False):
    """Batched inference over the stacked obs of every replica."""
    main, proprio = net.inputs_from_obs(obs)
    mean, log_std, value, _, hidden_out = net.forward(main, proprio, hidden if net.cfg.recurrent else None)
    if greedy:
        action = mean
    else:
        action = sample(mean, log_std, rng)
    logp, _ = gaussian_logprob_entropy(mean, log_std, action)
    return action.astype(np.float32), logp.astype(np.float32), value.astype(np.float32), hidden_out


def collect_rollout(net: PolicyNet, sim, state: RolloutState, horizon: int) -> ExperienceBuffer:
    """Run ``horizon`` lockstep steps against ``sim`` and fill a fresh buffer.

    Step t+1 only starts once every replica has answered step t.  The bootstrap
    values come from the observation that follows the last stored transition.
    """
    cfg = net.cfg
    N = len(state.obs["proprio"])
    main_shape = state.obs[cfg.obs_key].shape[1:]
    buf = ExperienceBuffer.allocate(horizon, N, main_shape, cfg.proprio_dim, cfg.action_dim, net.hidden_size)
    buf.init_hidden[...] = state.hidden
    for t in range(horizon):
        t0 = time.perf_counter()
        action, logp, value, hidden = policy_act(net, state.obs, state.hidden, state.rng)
        t1 = time.perf_counter()
        rewards, dones, successes, next_obs = sim.step(action)
        t2 = time.perf_counter()
        buf.main[t] = state.obs[cfg.obs_key]
        buf.proprio[t] = state.obs["proprio"]
        buf.actions[t] = action
        buf.log_probs[t] = logp
        buf.values[t] = value
        buf.rewards[t] = rewards
        buf.dones[t] = dones
        buf.successes[t] = successes
        if cfg.recurrent:
            hidden = hidden * (~np.asarray(dones, bool))[:, None]
            state.hidden = hidden.astype(np.float32)
        state.obs = next_obs
        state.env_steps += N
        state.timings["inference"] += t1 - t0
        state.timings["env"] += t2 - t1
    main, proprio = net.inputs_from_obs(state.obs)
    _, _, value, _, _ = net.forward(main, proprio, state.hidden if cfg.recurrent else None)
    buf.bootstrap_values[...] = value
    return buf
