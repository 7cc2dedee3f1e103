"""Frozen-policy throughput of the single-process and disaggregated layouts.

Phases are disjoint so they sum to at most the wall time:
  inference  batched forward pass on the learner
  env        stepping envs; in the disaggregated layout this is the wait for
             all StepResults, which covers remote stepping plus transfer/decode
  wire       encoding and sending Actions frames
"""

from __future__ import annotations

import json
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..env import EnvConfig
from ..learner.buffer import RolloutState, collect_rollout
from ..learner.sim import LocalSim, RemoteSim, listen
from ..nn import NetConfig, PolicyNet
from .launch import Child, cli_argv, supervise


@dataclass
class BenchResult:
    topology: str
    num_envs: int
    replicas: int
    env_steps: int
    wall_sec: float
    inference_sec: float
    env_sec: float
    wire_sec: float

    @property
    def steps_per_sec(self) -> float:
        return self.env_steps / self.wall_sec

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["steps_per_sec"] = self.steps_per_sec
        d["steps_per_sec_per_env"] = self.steps_per_sec / self.num_envs
        return d


def _run(net: PolicyNet, sim, duration: float, horizon: int, seed: int) -> tuple[RolloutState, float]:
    state = RolloutState(sim.initial_obs(), net.initial_hidden(sim.num_envs), np.random.default_rng(seed))
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < duration:
        collect_rollout(net, sim, state, horizon)
    return state, time.perf_counter() - t0


def bench_throughput(
    topology: str,
    duration: float,
    env_cfg: EnvConfig,
    num_envs: int,
    replicas: int = 3,
    net_cfg: NetConfig | None = None,
    horizon: int = 16,
    seed: int = 0,
    host: str = "127.0.0.1",
) -> BenchResult:
    net = PolicyNet(net_cfg or NetConfig.for_obs(env_cfg.obs_mode, env_cfg.width, env_cfg.height))
    if topology == "single":
        sim = LocalSim(env_cfg, np.arange(num_envs), seed)
        state, wall = _run(net, sim, duration, horizon, seed)
        t = state.timings
        return BenchResult(topology, num_envs, 1, state.env_steps, wall, t["inference"], t["env"], 0.0)
    if topology != "disagg":
        raise ValueError(f"unknown topology {topology!r}")

    listener = listen(host, 0)
    port = listener.getsockname()[1]
    base, extra = divmod(num_envs, replicas)
    sizes = [base + (i < extra) for i in range(replicas)]
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "env.json"
        cfg_path.write_text(json.dumps(env_cfg.to_dict()))
        children, offset = [], 0
        for rid, n in enumerate(sizes):
            children.append(Child(f"replica{rid}", cli_argv("replica", "--id", rid, "--connect", f"{host}:{port}",
                                                            "--envs", n, "--config", cfg_path, "--seed", seed,
                                                            "--offset", offset), echo=False))
            offset += n
        sim = None
        try:
            sim = RemoteSim.accept(listener, replicas, env_cfg, timeout=60.0)
            state, wall = _run(net, sim, duration, horizon, seed)
        finally:
            if sim is not None:
                sim.close()
            listener.close()
            codes = supervise(children, drain=10.0)
    if any(c != 0 for c in codes.values()):
        raise RuntimeError(f"replica exit codes {codes}")
    return BenchResult(
        topology, num_envs, replicas, state.env_steps, wall,
        state.timings["inference"], sim.timings["recv"], sim.timings["send"],
    )
