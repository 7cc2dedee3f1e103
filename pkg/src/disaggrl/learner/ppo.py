"""Clipped-surrogate PPO on an :class:`ExperienceBuffer`."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from ..nn import AdamState, PolicyNet, adam_step, clip_grad_norm, gaussian_logprob_entropy, logprob_grads
from .buffer import ExperienceBuffer
from .gae import compute_gae, normalize


class PpoError(FloatingPointError):
    pass


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    vf_coef: float = 0.5
    ent_coef: float = 0.005
    max_grad_norm: float = 1.0
    lr: float = 3e-4
    horizon: int = 16
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must be in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def minibatch(buf: ExperienceBuffer, adv, returns, env_idx) -> dict:
    """Full-horizon sequences of the selected envs, flattened time-major."""
    H, m = buf.horizon, len(env_idx)

    def take(a):
        x = a[:, env_idx]
        return x.reshape(H * m, *x.shape[2:])

    return {
        "main": take(buf.main),
        "proprio": take(buf.proprio),
        "actions": take(buf.actions),
        "log_probs": take(buf.log_probs),
        "adv": take(adv),
        "returns": take(returns),
        "init_hidden": buf.init_hidden[env_idx],
        "resets": buf.resets()[:, env_idx],
        "seq_len": H,
    }


def ppo_loss_and_grads(net: PolicyNet, mb: dict, cfg: PpoConfig):
    """Loss value, statistics and parameter gradients on one minibatch.

    loss = -mean(min(r*A, clip(r)*A)) + c_v*mean((V - R)^2) - c_e*mean(entropy)
    """
    recurrent = net.cfg.recurrent
    mean, log_std, value, _, _ = net.forward(
        mb["main"],
        mb["proprio"],
        mb["init_hidden"] if recurrent else None,
        seq_len=mb["seq_len"] if recurrent else 1,
        resets=mb["resets"] if recurrent else None,
        keep_cache=True,
    )
    actions, adv, ret = mb["actions"], mb["adv"], mb["returns"]
    B = len(actions)
    logp, entropy = gaussian_logprob_entropy(mean, log_std, actions)
    ratio = np.exp(logp - mb["log_probs"])
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    pg_loss = -float(np.minimum(s1, s2).mean())
    v_err = value - ret
    v_loss = float((v_err * v_err).mean())
    ent = float(entropy.mean())
    loss = pg_loss + cfg.vf_coef * v_loss - cfg.ent_coef * ent
    if not np.isfinite(loss):
        net._cache = None
        raise PpoError(f"non-finite PPO loss (pg={pg_loss}, v={v_loss}, ent={ent})")

    d_logp = (-(adv * ratio) * (s1 <= s2) / B).astype(np.float32)
    g_mean, g_logstd = logprob_grads(mean, log_std, actions)
    d_mean = d_logp[:, None] * g_mean
    d_log_std = (d_logp[:, None] * g_logstd).sum(axis=0) - cfg.ent_coef
    d_value = (2.0 * cfg.vf_coef / B) * v_err
    grads = net.backward(d_mean.astype(np.float32), d_log_std.astype(np.float32), d_value.astype(np.float32))
    log_ratio = logp - mb["log_probs"]
    stats = {
        "loss": loss,
        "policy_loss": pg_loss,
        "value_loss": v_loss,
        "entropy": ent,
        "clip_frac": float((np.abs(ratio - 1.0) > cfg.clip).mean()),
        "kl": float(((ratio - 1.0) - log_ratio).mean()),
    }
    return grads, stats


GradHook = Callable[[dict], dict]


def ppo_update(
    net: PolicyNet,
    adam: AdamState,
    buf: ExperienceBuffer,
    cfg: PpoConfig,
    rng: np.random.Generator,
    grad_hook: GradHook | None = None,
    after_step: Callable[[PolicyNet], None] | None = None,
) -> dict:
    """GAE, then ``epochs`` passes of env-major minibatch Adam steps.

    ``grad_hook`` sees raw minibatch gradients before clipping; the data-parallel
    mode uses it to swap in the averaged gradient.
    """
    adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap_values, cfg.gamma, cfg.lam)
    if cfg.normalize_advantages:
        adv = normalize(adv)
    totals: dict[str, float] = {}
    steps = 0
    params = net.params
    for _ in range(cfg.epochs):
        perm = rng.permutation(buf.num_envs)
        for idx in np.array_split(perm, cfg.minibatches):
            if len(idx) == 0:
                continue
            grads, st = ppo_loss_and_grads(net, minibatch(buf, adv, ret, idx), cfg)
            if grad_hook is not None:
                grads = grad_hook(grads)
            st["grad_norm"] = clip_grad_norm(grads, cfg.max_grad_norm)
            adam_step(params, grads, adam)
            if after_step is not None:
                after_step(net)
            for k, v in st.items():
                totals[k] = totals.get(k, 0.0) + v
            steps += 1
    out = {k: v / max(steps, 1) for k, v in totals.items()}
    out["updates"] = steps
    return out
