"""The training loop: rollout, GAE + PPO, ADR, metrics, checkpoints."""

from __future__ import annotations

import json
import logging
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import psutil

from ..env import EnvConfig, adr_update
from ..evaluation import evaluate_net
from ..nn import AdamState, NetConfig, PolicyNet, flatten_grads, save_checkpoint, unflatten_like
from .buffer import ExperienceBuffer, RolloutState, collect_rollout
from .ppo import PpoConfig, ppo_update

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig | None = None
    ppo: PpoConfig = field(default_factory=PpoConfig)
    num_envs: int = 256  # total across replicas (per worker in dp mode)
    replicas: int = 3
    iters: int = 100
    seed: int = 0
    checkpoint_every: int = 10
    eval_every: int = 0
    eval_episodes: int = 100
    eval_fraction: float = 0.0
    sr_window: int = 512
    adr: bool = True
    frozen: bool = False
    time_budget: float | None = None
    stop_at_fraction: float | None = None
    snapshot_at: list[float] = field(default_factory=list)  # seconds; keep the last weights saved by each mark

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        if isinstance(self.ppo, dict):
            self.ppo = PpoConfig(**self.ppo)
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        if self.net is None:
            self.net = NetConfig.for_obs(self.env.obs_mode, self.env.width, self.env.height, seed=self.seed)
        if self.net.obs_key not in self.env.obs_modes:
            raise ValueError(f"network reads {self.net.obs_key!r} but env emits {self.env.obs_modes}")
        if self.num_envs < 1 or self.replicas < 1:
            raise ValueError("num_envs and replicas must be positive")

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "net": self.net.to_dict(),
            "ppo": self.ppo.to_dict(),
            **{k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("env", "net", "ppo")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def shard_sizes(self) -> list[int]:
        """Envs per replica, contiguous offsets in launch order."""
        base, extra = divmod(self.num_envs, self.replicas)
        return [base + (i < extra) for i in range(self.replicas)]


def param_checksum(net: PolicyNet) -> int:
    return zlib.crc32(net.get_flat().tobytes())


class MetricsWriter:
    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fp:
                fp.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


class Trainer:
    """One learner.  ``sim`` is a LocalSim or RemoteSim; ``comm`` is set in dp mode."""

    def __init__(self, cfg: TrainConfig, sim, out_dir=None, comm=None, net: PolicyNet | None = None):
        self.cfg = cfg
        self.sim = sim
        self.comm = comm
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.net = net if net is not None else PolicyNet(cfg.net)
        self.adam = AdamState(lr=cfg.ppo.lr)
        self.adr = cfg.env.make_adr()
        rank = comm.rank if comm is not None else 0
        self.update_rng = np.random.default_rng([cfg.seed, rank, 1])
        self.state = RolloutState(
            sim.initial_obs(), self.net.initial_hidden(sim.num_envs), np.random.default_rng([cfg.seed, rank, 0])
        )
        self.metrics = MetricsWriter(self.out_dir / "metrics.jsonl" if self.out_dir else None)
        self.recent = deque(maxlen=cfg.sr_window)
        self.iteration = 0
        self.checksums: list[int] = []
        self.last_buffer: ExperienceBuffer | None = None
        self.best_eval: float | None = None
        self._t_start = time.perf_counter()

    # dp hooks

    def _grad_hook(self, grads: dict) -> dict:
        flat = flatten_grads(grads)
        avg = self.comm.average(len(self.checksums), flat)
        return unflatten_like(avg, grads)

    def _after_step(self, net: PolicyNet) -> None:
        self.checksums.append(param_checksum(net))

    def step(self) -> dict:
        cfg = self.cfg
        t0 = time.perf_counter()
        buf = collect_rollout(self.net, self.sim, self.state, cfg.ppo.horizon)
        t1 = time.perf_counter()
        self.last_buffer = buf
        stats: dict = {}
        if not cfg.frozen:
            stats = ppo_update(
                self.net,
                self.adam,
                buf,
                cfg.ppo,
                self.update_rng,
                grad_hook=self._grad_hook if self.comm is not None else None,
                after_step=self._after_step,
            )
        t2 = time.perf_counter()

        results = buf.episode_results()
        self.recent.extend(results.tolist())
        if cfg.adr:
            before = self.adr.fractions()
            adr_update(self.adr, results)
            if not np.array_equal(before, self.adr.fractions()):
                self.sim.set_adr(self.adr.fractions())
                log.info("iter %d: ADR fraction -> %.2f", self.iteration, self.adr.fraction)

        self.iteration += 1
        steps = cfg.ppo.horizon * buf.num_envs
        rec = {
            "iter": self.iteration,
            "env_steps": self.state.env_steps,
            "sr": float(np.mean(self.recent)) if self.recent else 0.0,
            "episodes": int(len(results)),
            "adr_fraction": self.adr.fraction,
            "pct_terminal_params": self.adr.pct_terminal(),
            "policy_loss": stats.get("policy_loss", 0.0),
            "value_loss": stats.get("value_loss", 0.0),
            "entropy": stats.get("entropy", 0.0),
            "clip_frac": stats.get("clip_frac", 0.0),
            "kl": stats.get("kl", 0.0),
            "steps_per_sec": steps / max(t2 - t0, 1e-9),
            "rollout_sec": t1 - t0,
            "update_sec": t2 - t1,
            "wall_sec": time.perf_counter() - self._t_start,
            "buffer_bytes": buf.image_bytes,
            "buffer_total_bytes": buf.total_bytes,
            "rss_bytes": psutil.Process().memory_info().rss,
        }
        if self.checksums:
            rec["param_crc"] = self.checksums[-1]
        if cfg.eval_every and self.iteration % cfg.eval_every == 0:
            ev = evaluate_net(self.net, cfg.env, cfg.eval_episodes, cfg.eval_fraction, seed=cfg.seed + 7919)
            rec["eval_sr"] = ev.sr
            rec["eval_fraction"] = cfg.eval_fraction
            if self.best_eval is None or ev.sr > self.best_eval:
                self.best_eval = ev.sr
                self.save("best.ckpt")
        self.metrics.write(rec)
        for mark in cfg.snapshot_at:
            if rec["wall_sec"] <= mark:
                self.save(f"snapshot_{int(mark)}s.ckpt", wall_sec=rec["wall_sec"])
        if self.out_dir is not None and cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
            self.save()
        return rec

    def save(self, name: str = "last.ckpt", **extra) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / name
        save_checkpoint(
            self.net,
            path,
            {
                "env": self.cfg.env.to_dict(),
                "iter": self.iteration,
                "env_steps": self.state.env_steps,
                "adr_fraction": self.adr.fraction,
                **extra,
            },
        )
        return path

    def done(self) -> bool:
        cfg = self.cfg
        if self.iteration >= cfg.iters:
            return True
        if cfg.time_budget is not None and time.perf_counter() - self._t_start >= cfg.time_budget:
            return True
        return cfg.stop_at_fraction is not None and self.adr.fraction >= cfg.stop_at_fraction

    def run(self) -> list[dict]:
        try:
            while not self.done():
                rec = self.step()
                log.info(
                    "iter %d steps %d sr %.3f f %.2f %s",
                    rec["iter"], rec["env_steps"], rec["sr"], rec["adr_fraction"],
                    f"eval {rec['eval_sr']:.3f}" if "eval_sr" in rec else "",
                )
        finally:
            self.save()
        return self.metrics.records
